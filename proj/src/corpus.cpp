#include "ppd/corpus.hpp"

#include "ppd/errors.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

namespace ppd {

namespace {

constexpr std::array kSubjects = {"the cat",     "a small dog", "my old friend", "the teacher",
                                  "our neighbor", "the young girl", "a tall man", "the farmer"};
constexpr std::array kVerbs = {"found", "painted", "carried", "watched", "opened", "cleaned", "sold", "bought"};
constexpr std::array kAdjectives = {"red", "quiet", "heavy", "bright", "wooden", "broken", "little", "green"};
constexpr std::array kNouns = {"box", "window", "basket", "garden", "bicycle", "letter", "table", "lamp"};
constexpr std::array kPrepositions = {"near", "behind", "under", "beside", "inside"};
constexpr std::array kPlaces = {"the river", "the old house", "the market", "the school", "the station"};
constexpr std::array kTimes = {"in the morning", "after lunch", "every evening", "on sunday"};

template <typename Array>
std::string pick(const Array & words, std::mt19937_64 & rng) {
    std::uniform_int_distribution<std::size_t> d(0, words.size() - 1);
    return words[d(rng)];
}

std::string sentence(std::mt19937_64 & rng) {
    std::uniform_int_distribution<int> which(0, 3);
    switch (which(rng)) {
        case 0:
            return pick(kSubjects, rng) + " " + pick(kVerbs, rng) + " the " + pick(kAdjectives, rng) + " " +
                   pick(kNouns, rng) + " " + pick(kPrepositions, rng) + " " + pick(kPlaces, rng) + ".";
        case 1:
            return pick(kSubjects, rng) + " " + pick(kVerbs, rng) + " a " + pick(kAdjectives, rng) + " " +
                   pick(kNouns, rng) + " " + pick(kTimes, rng) + ".";
        case 2:
            return pick(kTimes, rng) + ", " + pick(kSubjects, rng) + " " + pick(kVerbs, rng) + " the " +
                   pick(kNouns, rng) + ".";
        default:
            return pick(kSubjects, rng) + " said that the " + pick(kNouns, rng) + " was " + pick(kAdjectives, rng) +
                   ".";
    }
}

} // namespace

std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size() + 2);
    out.push_back(kBosToken);
    for (char c : text) {
        out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    }
    out.push_back(kEosToken);
    return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
    std::string out;
    for (TokenId t : tokens) {
        if (t >= 0 && t < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
    }
    return out;
}

std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        std::string_view line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (!line.empty()) {
            lines.emplace_back(line);
        }
        start = end + 1;
    }
    return lines;
}

std::vector<std::vector<TokenId>> tokenize_corpus(std::string_view text, std::size_t max_context) {
    if (max_context == 0) {
        throw ConfigError("max_context must be positive");
    }
    std::vector<std::vector<TokenId>> out;
    for (const std::string & line : split_lines(text)) {
        const std::vector<TokenId> doc = tokenize(line);
        for (std::size_t i = 0; i < doc.size(); i += max_context) {
            const std::size_t end = std::min(doc.size(), i + max_context);
            out.emplace_back(doc.begin() + static_cast<long>(i), doc.begin() + static_cast<long>(end));
        }
    }
    return out;
}

std::string synthetic_corpus(std::size_t n_lines, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> n_sentences(2, 4);
    std::ostringstream out;
    for (std::size_t i = 0; i < n_lines; ++i) {
        const int k = n_sentences(rng);
        for (int s = 0; s < k; ++s) {
            out << (s == 0 ? "" : " ") << sentence(rng);
        }
        out << '\n';
    }
    return out.str();
}

std::string read_text_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read '" + path + "'");
    }
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string & path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write '" + path + "'");
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
        throw DataError("failed writing '" + path + "'");
    }
}

} // namespace ppd
