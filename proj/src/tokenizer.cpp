#include "simplexlm/tokenizer.hpp"

#include <fstream>
#include <sstream>

#include "simplexlm/errors.hpp"

namespace simplexlm {

Tokenizer Tokenizer::default_charset() {
    std::string chars;
    for (char c = 'a'; c <= 'z'; ++c) chars.push_back(c);
    for (char c = 'A'; c <= 'Z'; ++c) chars.push_back(c);
    for (char c = '0'; c <= '9'; ++c) chars.push_back(c);

    Tokenizer tok;
    tok.id_to_char_.push_back("<pad>");
    tok.id_to_char_.push_back("<eos>");
    tok.char_to_id_.assign(256, -1);
    for (char c : chars) {
        tok.char_to_id_[static_cast<unsigned char>(c)] =
            static_cast<TokenId>(tok.id_to_char_.size());
        tok.id_to_char_.push_back(std::string(1, c));
    }
    tok.pad_id_ = 0;
    tok.eos_id_ = 1;
    return tok;
}

Tokenizer Tokenizer::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open token map: " + path);
    }
    Tokenizer tok;
    tok.pad_id_ = -1;
    tok.eos_id_ = -1;
    std::vector<std::pair<TokenId, std::string>> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            throw FormatError("token map " + path + " line " + std::to_string(line_no) +
                              ": expected id<TAB>token");
        }
        TokenId id = 0;
        try {
            id = static_cast<TokenId>(std::stol(line.substr(0, tab)));
        } catch (const std::exception&) {
            throw FormatError("token map " + path + " line " + std::to_string(line_no) +
                              ": bad id");
        }
        entries.emplace_back(id, line.substr(tab + 1));
    }
    if (entries.empty()) {
        throw FormatError("token map " + path + ": no entries");
    }
    TokenId max_id = 0;
    for (const auto& [id, _] : entries) {
        if (id < 0) {
            throw FormatError("token map " + path + ": negative id");
        }
        max_id = std::max(max_id, id);
    }
    tok.id_to_char_.assign(static_cast<size_t>(max_id) + 1, "");
    tok.char_to_id_.assign(256, -1);
    for (const auto& [id, text] : entries) {
        if (!tok.id_to_char_[id].empty()) {
            throw FormatError("token map " + path + ": duplicate id " + std::to_string(id));
        }
        tok.id_to_char_[id] = text;
        if (text == "<pad>") {
            tok.pad_id_ = id;
        } else if (text == "<eos>") {
            tok.eos_id_ = id;
        } else if (text.size() == 1) {
            tok.char_to_id_[static_cast<unsigned char>(text[0])] = id;
        } else {
            throw FormatError("token map " + path + ": token '" + text +
                              "' is neither a single character nor <pad>/<eos>");
        }
    }
    for (size_t i = 0; i < tok.id_to_char_.size(); ++i) {
        if (tok.id_to_char_[i].empty()) {
            throw FormatError("token map " + path + ": id " + std::to_string(i) +
                              " missing (ids must be dense)");
        }
    }
    if (tok.pad_id_ < 0 || tok.eos_id_ < 0) {
        throw FormatError("token map " + path + ": <pad> and <eos> entries are required");
    }
    return tok;
}

TokenSeq Tokenizer::encode(std::string_view text) const {
    TokenSeq out;
    out.eos_id = eos_id_;
    out.ids.reserve(text.size());
    for (char c : text) {
        const TokenId id = char_to_id_[static_cast<unsigned char>(c)];
        if (id < 0) {
            throw DomainError(std::string("tokenizer: character '") + c +
                              "' not in vocabulary");
        }
        out.ids.push_back(id);
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id < 0 || id >= vocab_size()) {
            throw DomainError("tokenizer: id " + std::to_string(id) + " out of range");
        }
        if (id == pad_id_ || id == eos_id_) {
            continue;
        }
        out += id_to_char_[id];
    }
    return out;
}

} // namespace simplexlm
