// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>

namespace aquila {

// Both texts are normalised (lower case, punctuation split) before comparing.
bool exact_match(std::string_view prediction, std::string_view reference);

// Harmonic mean of bag-of-words precision and recall, counting repeated words
// with multiplicity. Two empty texts score 1.
double token_f1(std::string_view prediction, std::string_view reference);

}  // namespace aquila
