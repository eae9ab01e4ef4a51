#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace simplexlm {

// Subcommand entry points. Each returns a process exit code:
//   0 success, 2 config error, 3 numeric error, 4 I/O error.
// Output goes to `out`, diagnostics to `err`.

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err);

int cmd_decode(const std::string& config_path, const std::string& prompt,
               bool prompt_is_file, const std::string& trace_path, std::ostream& out,
               std::ostream& err);

int cmd_collab(const std::string& config_path, const std::string& instruction,
               const std::string& expert_file, const std::vector<double>& lambdas,
               const std::string& expect, std::ostream& out, std::ostream& err);

int cmd_eval(const std::string& config_path, const std::string& heldout_path,
             std::ostream& out, std::ostream& err);

int cmd_mask_dump(int prompt_len, int block_count, int block_size, std::ostream& out,
                  std::ostream& err);

} // namespace simplexlm
