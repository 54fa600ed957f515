#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ditmem {

// Lowercased maximal runs of ASCII letters and digits.
std::vector<std::string> caption_words(std::string_view text);

}  // namespace ditmem
