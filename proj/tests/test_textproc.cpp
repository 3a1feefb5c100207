#include <set>

#include "doctest.h"
#include "jstts/error.hpp"
#include "jstts/textproc.hpp"

using namespace jstts;

TEST_CASE("tokenize produces UTF-8 bytes") {
  CHECK(tokenize("ab").tokens == std::vector<int>{97, 98});
  CHECK(tokenize("é").tokens == std::vector<int>{195, 169});
  CHECK(tokenize("").tokens.empty());
}

TEST_CASE("round trip over random code points") {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    std::u32string cps;
    const int len = static_cast<int>(rng.uniform_int(12));
    for (int i = 0; i < len; ++i) {
      char32_t cp;
      do {
        cp = static_cast<char32_t>(rng.uniform_int(0x110000));
      } while (cp >= 0xD800 && cp <= 0xDFFF);
      cps.push_back(cp);
    }
    const std::string s = utf8_encode(cps);
    ByteSeq b = tokenize(s);
    for (int t : b.tokens) CHECK(t < 256);
    CHECK(detokenize(b.tokens) == s);
    CHECK(utf8_decode(detokenize(b.tokens)) == cps);
  }
}

TEST_CASE("invalid bytes decode to replacement characters") {
  std::u32string d = utf8_decode(std::string("a\xCE", 2));
  CHECK(d == std::u32string{U'a', U'�'});
}

TEST_CASE("mask_spans edge cases") {
  Rng rng(1);
  ByteSeq x = tokenize("abcdefghij");
  MaskedByteSeq none = mask_spans(x, 3, 0.0, rng);
  CHECK(none.mask_positions.empty());
  CHECK(none.tokens == x.tokens);
  MaskedByteSeq all = mask_spans(x, 1, 1.0, rng);
  CHECK(all.mask_positions.size() == 10);
  for (int t : all.tokens) CHECK(t == kMaskToken);
  CHECK(all.originals == x.tokens);
  CHECK_THROWS_AS(mask_spans(x, 0, 0.5, rng), ValueError);
}

TEST_CASE("mask_spans invariants") {
  Rng rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(60));
    ByteSeq x;
    for (int i = 0; i < n; ++i) x.tokens.push_back(static_cast<int>(rng.uniform_int(256)));
    const int span = 1 + static_cast<int>(rng.uniform_int(8));
    const double ratio = rng.uniform();
    MaskedByteSeq m = mask_spans(x, span, ratio, rng);
    CHECK(std::is_sorted(m.mask_positions.begin(), m.mask_positions.end()));
    std::set<int> pos(m.mask_positions.begin(), m.mask_positions.end());
    for (int i = 0; i < n; ++i) CHECK((m.tokens[i] == kMaskToken) == (pos.count(i) == 1));
    if (n >= span) CHECK(static_cast<double>(pos.size()) / n >= ratio);
  }
}

TEST_CASE("mask_spans is deterministic given the seed") {
  ByteSeq x = tokenize("the quick brown fox jumps");
  Rng a(5), b(5);
  CHECK(mask_spans(x, 4, 0.3, a).mask_positions == mask_spans(x, 4, 0.3, b).mask_positions);
}

TEST_CASE("cer examples") {
  CHECK(cer("abc", "abc") == 0.0);
  CHECK(cer("abc", "") == 1.0);
  CHECK(cer("kitten", "sitting") == doctest::Approx(0.5));
  CHECK_THROWS_AS(cer("", "x"), ValueError);
  // characters, not bytes: one substituted two-byte letter is one edit
  CHECK(cer("αβ", "αγ") == doctest::Approx(0.5));
}

TEST_CASE("cer edit count is symmetric") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::string a, b;
    for (int i = 0, n = 1 + static_cast<int>(rng.uniform_int(8)); i < n; ++i) a += static_cast<char>('a' + rng.uniform_int(4));
    for (int i = 0, n = 1 + static_cast<int>(rng.uniform_int(8)); i < n; ++i) b += static_cast<char>('a' + rng.uniform_int(4));
    CHECK(cer(a, b) * a.size() == doctest::Approx(cer(b, a) * b.size()));
  }
}

TEST_CASE("registry lookup with OOV fallback") {
  IdRegistry reg;
  LangId a = reg.add_language("lang_A");
  reg.add_language("lang_B");
  SpkId s = reg.add_speaker("spk_1");
  CHECK(a.value == 1);
  CHECK(reg.add_language("lang_A") == a);
  CHECK(reg.lookup_ids("lang_A", "spk_1") == std::pair{a, s});
  CHECK(reg.lookup_ids("lang_Z", "spk_1").first.value == kOovId);
  CHECK(reg.lookup_ids("lang_A", "nobody") == std::pair{a, SpkId{kOovId}});
  CHECK(reg.num_languages() == 3);
}
