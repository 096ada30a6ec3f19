#pragma once

#include "ppd/model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ppd {

// BOS, the bytes of `text`, EOS.
std::vector<TokenId> tokenize(std::string_view text);
// Drops BOS/EOS and maps byte tokens back to characters.
std::string detokenize(std::span<const TokenId> tokens);

// One document per line; each tokenized document is cut into chunks of at
// most `max_context` tokens. Empty lines are skipped.
std::vector<std::vector<TokenId>> tokenize_corpus(std::string_view text, std::size_t max_context);

// Templated English-like sentences, one document per line.
std::string synthetic_corpus(std::size_t n_lines, std::uint64_t seed);

std::vector<std::string> split_lines(std::string_view text);
std::string read_text_file(const std::string & path);
void write_text_file(const std::string & path, std::string_view text);

} // namespace ppd
