#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace simplexlm {

using TokenId = int32_t;

// A sequence of token ids in [0, V). The eos id travels with the sequence
// when the producer knows it (decoding uses it for pruning).
struct TokenSeq {
    std::vector<TokenId> ids;
    std::optional<TokenId> eos_id;

    TokenSeq() = default;
    explicit TokenSeq(std::vector<TokenId> v) : ids(std::move(v)) {}
    int length() const { return static_cast<int>(ids.size()); }
    bool empty() const { return ids.empty(); }
};

// Character-level tokenizer. The default charset is exactly 64 entries:
// <pad>, <eos>, a-z, A-Z, 0-9. A custom map can be loaded from a text file
// with one "id<TAB>token" pair per line, where token is a single character
// or the literal <pad>/<eos>.
class Tokenizer {
public:
    static Tokenizer default_charset();
    static Tokenizer from_file(const std::string& path);

    TokenSeq encode(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const; // skips pad/eos

    int vocab_size() const { return static_cast<int>(id_to_char_.size()); }
    TokenId pad_id() const { return pad_id_; }
    TokenId eos_id() const { return eos_id_; }

private:
    Tokenizer() = default;
    std::vector<std::string> id_to_char_;
    std::vector<TokenId> char_to_id_; // indexed by byte value, -1 = unknown
    TokenId pad_id_ = 0;
    TokenId eos_id_ = 1;
};

} // namespace simplexlm
