// SPDX-License-Identifier: Apache-2.0

#include "aquila/metrics.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "aquila/vocab.hpp"

namespace aquila {

bool exact_match(std::string_view prediction, std::string_view reference) {
  return normalize_text(prediction) == normalize_text(reference);
}

double token_f1(std::string_view prediction, std::string_view reference) {
  const auto pred = split_words(prediction);
  const auto ref = split_words(reference);
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, long> counts;
  for (const auto& w : ref) ++counts[w];
  long overlap = 0;
  for (const auto& w : pred) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = double(overlap) / double(pred.size());
  const double r = double(overlap) / double(ref.size());
  return 2 * p * r / (p + r);
}

}  // namespace aquila
