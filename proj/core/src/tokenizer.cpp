#include "cbench/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace cbench {

namespace {

using json = nlohmann::json;

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw TokenizerError(TokenizerError::Kind::BadInput,
                         std::string("cannot open ") + what + ": " + path);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utf8_of(int cp) {
  std::string s;
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xC0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    s += static_cast<char>(0xE0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return s;
}

// The GPT-2 byte-to-unicode table: printable bytes map to themselves, the
// rest to codepoints 256, 257, ... in byte order.
std::vector<std::string> make_byte_to_sym() {
  std::vector<bool> printable(256, false);
  for (int b = '!'; b <= '~'; ++b) printable[b] = true;
  for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
  for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
  std::vector<std::string> table(256);
  int next = 0;
  for (int b = 0; b < 256; ++b) {
    table[b] = printable[b] ? utf8_of(b) : utf8_of(256 + next++);
  }
  return table;
}

bool is_letter(unsigned char c) { return std::isalpha(c) != 0; }
bool is_digit(unsigned char c) { return std::isdigit(c) != 0; }

// Splits text into space-carrying units: the first unit is a run of
// non-space characters, every later unit is a single space plus a run.
std::vector<std::string_view> split_units(std::string_view text) {
  if (text.empty()) {
    throw TokenizerError(TokenizerError::Kind::BadInput,
                         "encode: empty text");
  }
  std::vector<std::string_view> units;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    if (text[i] == ' ') ++i;
    if (i >= text.size() || text[i] == ' ') {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "encode: consecutive or trailing spaces are not "
                           "representable");
    }
    while (i < text.size() && text[i] != ' ') ++i;
    units.push_back(text.substr(start, i - start));
  }
  return units;
}

// Further splits one unit into GPT-2-style pieces: contraction suffixes,
// letter runs, digit runs, and punctuation runs, with the unit's leading
// space attached to its first piece.
std::vector<std::string> split_pieces(std::string_view unit) {
  static const std::vector<std::string> kContractions = {"'s", "'t",  "'re",
                                                         "'ve", "'m", "'ll",
                                                         "'d"};
  std::vector<std::string> pieces;
  std::size_t i = 0;
  bool lead_space = false;
  if (!unit.empty() && unit[0] == ' ') {
    lead_space = true;
    i = 1;
  }
  while (i < unit.size()) {
    std::size_t start = i;
    std::string piece;
    bool matched_contraction = false;
    if (unit[i] == '\'') {
      for (const auto& c : kContractions) {
        if (unit.substr(i, c.size()) == c) {
          piece = std::string(unit.substr(i, c.size()));
          i += c.size();
          matched_contraction = true;
          break;
        }
      }
    }
    if (!matched_contraction) {
      const unsigned char first = static_cast<unsigned char>(unit[i]);
      auto in_run = [&](unsigned char c) {
        if (is_letter(first)) return is_letter(c);
        if (is_digit(first)) return is_digit(c);
        return !is_letter(c) && !is_digit(c);
      };
      ++i;
      while (i < unit.size()) {
        const unsigned char c = static_cast<unsigned char>(unit[i]);
        if (!in_run(c)) break;
        if (c == '\'' && !is_letter(first) && !is_digit(first)) {
          // Let a possible contraction start its own piece.
          bool next_is_contraction = false;
          for (const auto& cc : kContractions) {
            if (unit.substr(i, cc.size()) == cc) next_is_contraction = true;
          }
          if (next_is_contraction) break;
        }
        ++i;
      }
      piece = std::string(unit.substr(start, i - start));
    }
    if (pieces.empty() && lead_space) piece = " " + piece;
    pieces.push_back(std::move(piece));
  }
  return pieces;
}

}  // namespace

Tokenizer Tokenizer::lookup_from_vocab(std::vector<std::string> tokens) {
  Tokenizer t;
  t.mode_ = Mode::Lookup;
  t.id_to_token_ = std::move(tokens);
  for (std::size_t i = 0; i < t.id_to_token_.size(); ++i) {
    const auto& tok = t.id_to_token_[i];
    if (tok.empty()) {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "vocab: empty token at id " + std::to_string(i));
    }
    if (!t.token_to_id_.emplace(tok, static_cast<int>(i)).second) {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "vocab: duplicate token '" + tok + "'");
    }
  }
  return t;
}

Tokenizer Tokenizer::lookup_from_file(const std::string& path) {
  const std::string text = read_file(path, "vocab file");
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const bool is_trailing_blank = line.empty() && nl >= text.size() - 1;
    if (!is_trailing_blank) tokens.push_back(std::move(line));
    pos = nl + 1;
  }
  return lookup_from_vocab(std::move(tokens));
}

Tokenizer Tokenizer::bpe_from_strings(const std::string& vocab_json,
                                      const std::string& merges_text) {
  Tokenizer t;
  t.mode_ = Mode::ByteLevelBpe;
  t.byte_to_sym_ = make_byte_to_sym();
  for (int b = 0; b < 256; ++b) {
    t.sym_to_byte_[t.byte_to_sym_[b]] = static_cast<unsigned char>(b);
  }

  json doc;
  try {
    doc = json::parse(vocab_json);
  } catch (const json::parse_error& e) {
    throw TokenizerError(TokenizerError::Kind::BadInput,
                         std::string("vocab JSON parse error: ") + e.what());
  }
  if (!doc.is_object()) {
    throw TokenizerError(TokenizerError::Kind::BadInput,
                         "vocab JSON: expected an object of token -> id");
  }
  t.id_to_token_.resize(doc.size());
  std::vector<bool> seen(doc.size(), false);
  for (const auto& [tok, idj] : doc.items()) {
    if (!idj.is_number_integer()) {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "vocab JSON: id for '" + tok + "' is not integer");
    }
    const long long id = idj.get<long long>();
    if (id < 0 || id >= static_cast<long long>(doc.size()) || seen[id]) {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "vocab JSON: ids must be dense in [0, vocab size)");
    }
    seen[id] = true;
    t.id_to_token_[id] = tok;
    t.token_to_id_.emplace(tok, static_cast<int>(id));
  }

  std::istringstream ms(merges_text);
  std::string line;
  int rank = 0;
  while (std::getline(ms, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
        line.find(' ', sp + 1) != std::string::npos) {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "merges: malformed line '" + line + "'");
    }
    t.merge_rank_[{line.substr(0, sp), line.substr(sp + 1)}] = rank++;
  }
  return t;
}

Tokenizer Tokenizer::bpe_from_files(const std::string& vocab_path,
                                    const std::string& merges_path) {
  return bpe_from_strings(read_file(vocab_path, "vocab JSON"),
                          read_file(merges_path, "merges file"));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  return mode_ == Mode::Lookup ? encode_lookup(text) : encode_bpe(text);
}

std::vector<int> Tokenizer::encode_lookup(std::string_view text) const {
  std::vector<int> ids;
  for (std::string_view unit : split_units(text)) {
    auto it = token_to_id_.find(unit);
    if (it == token_to_id_.end()) {
      throw TokenizerError(TokenizerError::Kind::UnknownToken,
                           "encode: unknown token '" + std::string(unit) +
                               "'");
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::vector<int> Tokenizer::encode_bpe(std::string_view text) const {
  std::vector<int> ids;
  for (std::string_view unit : split_units(text)) {
    for (const std::string& piece : split_pieces(unit)) {
      std::vector<std::string> syms;
      syms.reserve(piece.size());
      for (unsigned char b : piece) syms.push_back(byte_to_sym_[b]);

      while (syms.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        std::size_t best_i = 0;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
          auto it = merge_rank_.find({syms[i], syms[i + 1]});
          if (it != merge_rank_.end() && it->second < best_rank) {
            best_rank = it->second;
            best_i = i;
          }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        const std::string first = syms[best_i];
        const std::string second = syms[best_i + 1];
        std::vector<std::string> merged;
        merged.reserve(syms.size());
        for (std::size_t i = 0; i < syms.size();) {
          if (i + 1 < syms.size() && syms[i] == first &&
              syms[i + 1] == second) {
            merged.push_back(first + second);
            i += 2;
          } else {
            merged.push_back(syms[i]);
            ++i;
          }
        }
        syms = std::move(merged);
      }

      for (const auto& s : syms) {
        auto it = token_to_id_.find(s);
        if (it == token_to_id_.end()) {
          throw TokenizerError(TokenizerError::Kind::UnknownToken,
                               "encode: merged symbol '" + s +
                                   "' is not in the vocabulary");
        }
        ids.push_back(it->second);
      }
    }
  }
  return ids;
}

std::string Tokenizer::token_surface(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw TokenizerError(TokenizerError::Kind::BadInput,
                         "decode: id " + std::to_string(id) +
                             " out of range");
  }
  const std::string& tok = id_to_token_[id];
  if (mode_ == Mode::Lookup) return tok;
  // Map each codepoint of the stored symbol string back to its byte.
  std::string out;
  std::size_t i = 0;
  while (i < tok.size()) {
    const unsigned char c = static_cast<unsigned char>(tok[i]);
    std::size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    auto it = sym_to_byte_.find(tok.substr(i, len));
    if (it == sym_to_byte_.end()) {
      throw TokenizerError(TokenizerError::Kind::BadInput,
                           "decode: token '" + tok +
                               "' contains an unmapped symbol");
    }
    out += static_cast<char>(it->second);
    i += len;
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += token_surface(id);
  return out;
}

int Tokenizer::label_token_id(std::string_view label) const {
  const std::vector<int> ids = encode(label);
  if (ids.size() != 1) {
    throw TokenizerError(TokenizerError::Kind::MultiTokenLabel,
                         "label '" + std::string(label) + "' encodes to " +
                             std::to_string(ids.size()) +
                             " tokens; labels must be single tokens");
  }
  return ids[0];
}

std::vector<int> Tokenizer::last_token_offsets(
    std::span<const int> ids, const std::vector<std::size_t>& bounds,
    const std::vector<std::string>& regions, const std::string& which) const {
  std::vector<int> last(bounds.size(), -1);
  std::size_t prefix = 0;
  std::size_t region_idx = 0;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    prefix += token_surface(ids[j]).size();
    if (region_idx < bounds.size() && prefix >= bounds[region_idx]) {
      if (prefix != bounds[region_idx]) {
        throw TokenizerError(
            TokenizerError::Kind::BoundaryMismatch,
            "align_regions: region '" + regions[region_idx] + "' (" + which +
                ") does not end on a token boundary");
      }
      last[region_idx] = static_cast<int>(j);
      ++region_idx;
    }
  }
  if (region_idx != bounds.size()) {
    throw TokenizerError(TokenizerError::Kind::BoundaryMismatch,
                         "align_regions: region '" + regions[region_idx] +
                             "' (" + which + ") extends past the token "
                             "sequence");
  }
  return last;
}

RegionAlignment Tokenizer::align_regions(const EvalExample& example) const {
  return align_regions(example, {});
}

RegionAlignment Tokenizer::align_regions(
    const EvalExample& example,
    const std::vector<std::string>& region_names) const {
  if (example.base_regions.size() != example.source_regions.size() ||
      example.base_regions.empty()) {
    throw TokenizerError(TokenizerError::Kind::BadInput,
                         "align_regions: malformed example regions");
  }
  auto bounds_of = [](const std::vector<std::string>& regions) {
    std::vector<std::size_t> bounds;
    std::size_t cum = 0;
    for (std::size_t k = 0; k < regions.size(); ++k) {
      cum += (k > 0 ? 1 : 0) + regions[k].size();
      bounds.push_back(cum);
    }
    return bounds;
  };
  std::vector<std::string> names = region_names;
  if (names.size() != example.base_regions.size()) {
    names.clear();
    for (std::size_t k = 0; k < example.base_regions.size(); ++k) {
      names.push_back("#" + std::to_string(k));
    }
  }

  const std::vector<int> ids_b = encode(join_regions(example.base_regions));
  const std::vector<int> ids_s = encode(join_regions(example.source_regions));
  RegionAlignment out;
  out.base_last = last_token_offsets(ids_b, bounds_of(example.base_regions),
                                     names, "base");
  out.source_last = last_token_offsets(
      ids_s, bounds_of(example.source_regions), names, "source");
  out.base_len = static_cast<int>(ids_b.size());
  out.source_len = static_cast<int>(ids_s.size());
  return out;
}

}  // namespace cbench
