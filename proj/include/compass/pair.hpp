#pragma once

#include <string>
#include <vector>

namespace compass {

// Clean/corrupt prompt pair that differ only in the role scaffold.
struct RoleCrossPair {
    std::string clean_text;
    std::string corrupt_text;
    std::vector<int> clean_tokens;
    std::vector<int> corrupt_tokens;
    std::string target_clean_word;
    std::string target_corrupt_word;
    int target_clean = -1;
    int target_corrupt = -1;
    std::string role_clean;
    std::string role_corrupt;

    bool operator==(const RoleCrossPair&) const = default;
};

}  // namespace compass
