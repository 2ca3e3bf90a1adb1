#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cbench/taskgen.hpp"

namespace cbench {

class TokenizerError : public std::runtime_error {
 public:
  enum class Kind { UnknownToken, BoundaryMismatch, MultiTokenLabel, BadInput };
  TokenizerError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Last-token index of each template region in the base and source token
// sequences. Indices are strictly increasing in region order; base and
// source may differ in absolute index when tokenisation splits differently.
struct RegionAlignment {
  std::vector<int> base_last;
  std::vector<int> source_last;
  int base_len = 0;
  int source_len = 0;
};

// Two modes share one interface:
//  - lookup: whitespace units, each unit after the first carrying its single
//    leading space; vocab from a newline-delimited file, id = line number.
//  - byte-level BPE: GPT-2-style vocab JSON + ordered merges, with the
//    standard printable-byte remapping.
class Tokenizer {
 public:
  enum class Mode { Lookup, ByteLevelBpe };

  static Tokenizer lookup_from_vocab(std::vector<std::string> tokens);
  static Tokenizer lookup_from_file(const std::string& path);
  static Tokenizer bpe_from_strings(const std::string& vocab_json,
                                    const std::string& merges_text);
  static Tokenizer bpe_from_files(const std::string& vocab_path,
                                  const std::string& merges_path);

  Mode mode() const { return mode_; }
  std::size_t vocab_size() const { return id_to_token_.size(); }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  // Labels must map to exactly one token.
  int label_token_id(std::string_view label) const;

  // Boundary-mismatch errors name regions "#k" unless names are supplied.
  RegionAlignment align_regions(const EvalExample& example) const;
  RegionAlignment align_regions(
      const EvalExample& example,
      const std::vector<std::string>& region_names) const;

 private:
  Tokenizer() = default;

  std::vector<int> encode_lookup(std::string_view text) const;
  std::vector<int> encode_bpe(std::string_view text) const;
  std::string token_surface(int id) const;  // raw bytes a token decodes to
  std::vector<int> last_token_offsets(std::span<const int> ids,
                                      const std::vector<std::size_t>& bounds,
                                      const std::vector<std::string>& regions,
                                      const std::string& which) const;

  Mode mode_ = Mode::Lookup;
  std::map<std::string, int, std::less<>> token_to_id_;
  std::vector<std::string> id_to_token_;
  // BPE only.
  std::map<std::pair<std::string, std::string>, int> merge_rank_;
  std::vector<std::string> byte_to_sym_;        // 256 entries
  std::map<std::string, unsigned char> sym_to_byte_;
};

}  // namespace cbench
