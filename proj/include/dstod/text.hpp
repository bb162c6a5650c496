#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dstod {

/// Lowercases ASCII letters; other bytes pass through unchanged.
std::string to_lower(std::string_view text);

std::string trim(std::string_view text);

/// The shared word-level tokenizer. Lowercases, splits on whitespace and
/// emits every ASCII punctuation character as its own token. Non-ASCII
/// bytes are treated as word characters.
std::vector<std::string> tokenize(std::string_view text);

std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ");

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace dstod
