#include "jstts/textproc.hpp"

#include <algorithm>
#include <numeric>

#include "jstts/error.hpp"

namespace jstts {

ByteSeq tokenize(std::string_view text, LangId lang, SpkId spk) {
  ByteSeq out;
  out.tokens.reserve(text.size());
  for (unsigned char c : text) out.tokens.push_back(c);
  out.lang = lang;
  out.spk = spk;
  return out;
}

std::string detokenize(const std::vector<int>& tokens) {
  std::string s;
  s.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || t >= kByteVocab) throw ValueError("detokenize: token " + std::to_string(t) + " is not a byte");
    s.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return s;
}

std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  size_t i = 0;
  const size_t n = s.size();
  while (i < n) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0 && b0 >= 0xC2) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0 && b0 <= 0xF4) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= n;
    for (int k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        ok = false;
      } else {
        cp = (cp << 6) | (b & 0x3F);
      }
    }
    if (ok && ((len == 3 && (cp < 0x800 || (cp >= 0xD800 && cp <= 0xDFFF))) || (len == 4 && (cp < 0x10000 || cp > 0x10FFFF)))) {
      ok = false;
    }
    if (!ok) {
      out.push_back(U'\uFFFD');
      i += 1;
    } else {
      out.push_back(cp);
      i += len;
    }
  }
  return out;
}

std::string utf8_encode(char32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

std::string utf8_encode(std::u32string_view cps) {
  std::string s;
  for (char32_t c : cps) s += utf8_encode(c);
  return s;
}

std::vector<int> span_mask_positions(int n, int span_len, double mask_ratio, Rng& rng) {
  if (span_len < 1) throw ValueError("mask_spans: span_len must be >= 1");
  if (mask_ratio < 0.0 || mask_ratio > 1.0) throw ValueError("mask_spans: mask_ratio must lie in [0, 1]");
  std::vector<char> masked(static_cast<size_t>(n), 0);
  std::vector<int> starts(static_cast<size_t>(n));
  std::iota(starts.begin(), starts.end(), 0);
  int count = 0;
  for (int k = 0; k < n && count < mask_ratio * n; ++k) {
    // incremental Fisher-Yates: draw the k-th start without replacement
    const int j = k + static_cast<int>(rng.uniform_int(n - k));
    std::swap(starts[k], starts[j]);
    const int s = starts[k];
    for (int p = s; p < std::min(n, s + span_len); ++p) {
      if (!masked[p]) {
        masked[p] = 1;
        ++count;
      }
    }
  }
  std::vector<int> out;
  for (int p = 0; p < n; ++p)
    if (masked[p]) out.push_back(p);
  return out;
}

MaskedByteSeq mask_spans(const ByteSeq& x, int span_len, double mask_ratio, Rng& rng) {
  MaskedByteSeq out;
  out.tokens = x.tokens;
  out.lang = x.lang;
  out.spk = x.spk;
  out.mask_positions = span_mask_positions(static_cast<int>(x.tokens.size()), span_len, mask_ratio, rng);
  for (int p : out.mask_positions) {
    out.originals.push_back(x.tokens[p]);
    out.tokens[p] = kMaskToken;
  }
  return out;
}

size_t levenshtein(std::u32string_view a, std::u32string_view b) {
  std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), size_t{0});
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= b.size(); ++j) {
      const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cer(std::string_view ref, std::string_view hyp) {
  const std::u32string r = utf8_decode(ref);
  if (r.empty()) throw ValueError("cer: reference is empty");
  const std::u32string h = utf8_decode(hyp);
  return static_cast<double>(levenshtein(r, h)) / static_cast<double>(r.size());
}

LangId IdRegistry::add_language(const std::string& name) {
  if (name.empty()) throw ValueError("registry: empty language name");
  auto [it, inserted] = langs_.emplace(name, static_cast<int>(langs_.size()) + 1);
  return LangId{it->second};
}

SpkId IdRegistry::add_speaker(const std::string& name) {
  if (name.empty()) throw ValueError("registry: empty speaker name");
  auto [it, inserted] = spks_.emplace(name, static_cast<int>(spks_.size()) + 1);
  return SpkId{it->second};
}

LangId IdRegistry::language(const std::string& name) const {
  auto it = langs_.find(name);
  return it == langs_.end() ? LangId{} : LangId{it->second};
}

SpkId IdRegistry::speaker(const std::string& name) const {
  auto it = spks_.find(name);
  return it == spks_.end() ? SpkId{} : SpkId{it->second};
}

std::pair<LangId, SpkId> IdRegistry::lookup_ids(const std::string& lang_name, const std::string& spk_name) const {
  return {language(lang_name), speaker(spk_name)};
}

std::string IdRegistry::language_name(LangId id) const {
  for (const auto& [name, v] : langs_) {
    if (v == id.value) return name;
  }
  return {};
}

}  // namespace jstts
