#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "jstts/rng.hpp"

namespace jstts {

inline constexpr int kByteVocab = 256;
// One past the byte range; text-embedding tables therefore have 257 rows.
inline constexpr int kMaskToken = 256;
inline constexpr int kOovId = 0;

struct LangId {
  int value = kOovId;
  auto operator<=>(const LangId&) const = default;
};

struct SpkId {
  int value = kOovId;
  auto operator<=>(const SpkId&) const = default;
};

struct ByteSeq {
  std::vector<int> tokens;
  LangId lang;
  SpkId spk;
};

struct MaskedByteSeq {
  std::vector<int> tokens;          // kMaskToken at masked positions
  std::vector<int> mask_positions;  // sorted
  std::vector<int> originals;       // tokens that were replaced, in position order
  LangId lang;
  SpkId spk;
};

ByteSeq tokenize(std::string_view text, LangId lang = {}, SpkId spk = {});
std::string detokenize(const std::vector<int>& tokens);

// UTF-8 helpers. Invalid byte sequences decode to U+FFFD, one per bad byte.
std::u32string utf8_decode(std::string_view s);
std::string utf8_encode(std::u32string_view cps);
std::string utf8_encode(char32_t cp);

// Masks contiguous spans of span_len tokens (clipped at the end) with span
// starts drawn uniformly without replacement until at least mask_ratio of the
// positions are masked. Overlapping spans merge.
MaskedByteSeq mask_spans(const ByteSeq& x, int span_len, double mask_ratio, Rng& rng);
// The same draw over n positions; returns sorted masked indices.
std::vector<int> span_mask_positions(int n, int span_len, double mask_ratio, Rng& rng);

size_t levenshtein(std::u32string_view a, std::u32string_view b);
// Character error rate over Unicode code points; ref must be non-empty.
double cer(std::string_view ref, std::string_view hyp);

// Dense name -> id maps for languages and speakers with id 0 reserved for
// unknown names.
class IdRegistry {
 public:
  LangId add_language(const std::string& name);
  SpkId add_speaker(const std::string& name);

  LangId language(const std::string& name) const;
  SpkId speaker(const std::string& name) const;
  std::pair<LangId, SpkId> lookup_ids(const std::string& lang_name, const std::string& spk_name) const;

  bool has_language(const std::string& name) const { return langs_.count(name) != 0; }
  int num_languages() const { return static_cast<int>(langs_.size()) + 1; }
  int num_speakers() const { return static_cast<int>(spks_.size()) + 1; }
  const std::map<std::string, int>& languages() const { return langs_; }
  const std::map<std::string, int>& speakers() const { return spks_; }
  std::string language_name(LangId id) const;

  bool operator==(const IdRegistry&) const = default;

 private:
  std::map<std::string, int> langs_;
  std::map<std::string, int> spks_;
};

}  // namespace jstts
