#pragma once

#include <stdexcept>
#include <string>

namespace simplexlm {

// Error taxonomy, mapped to process exit codes by the CLI:
//   ConfigError (and subtypes), DomainError, ContractError -> 2
//   NumericError                                           -> 3
//   IoError, FormatError                                   -> 4

// Invalid configuration: bad option values, malformed config files,
// inconsistent model/decode settings.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A runtime value outside its mathematical domain (token id >= V,
// timestep out of range, degenerate logits row).
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse between modules: shape mismatches, unaligned block lengths.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Non-finite values produced during computation. Message names the
// offending tensor or iteration.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupt or truncated serialized data; message carries the byte offset.
struct FormatError : IoError {
    using IoError::IoError;
};

// A decode timestep fell outside every shard range in the shard table.
struct DispatchError : ConfigError {
    using ConfigError::ConfigError;
};

} // namespace simplexlm
