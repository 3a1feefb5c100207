#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "jstts/checkpoint.hpp"
#include "jstts/error.hpp"
#include "jstts/losses.hpp"
#include "jstts/model.hpp"

using namespace jstts;
using jstts::testing::random_tensor;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.hidden = 16;
  c.joint = 8;
  c.pred_embed = 8;
  c.n_langs = 4;
  c.n_spks = 3;
  return c;
}

}  // namespace

TEST_CASE("s2f halves the frame rate") {
  Model m(tiny(), 1);
  Rng rng(1);
  Tape tape;
  Binder b(tape, {});
  CHECK(m.s2f(b, random_tensor(rng, {10, 16}, 1.0)).shape() == Shape{5, 8});
  CHECK(m.s2f(b, random_tensor(rng, {11, 16}, 1.0)).shape() == Shape{6, 8});
  CHECK_THROWS_AS(m.s2f(b, Tensor({0, 16})), ValueError);
  CHECK_THROWS_AS(m.s2f(b, Tensor({4, 15})), ShapeError);
  Tensor s = random_tensor(rng, {8, 16}, 1.0);
  CHECK(m.s2f(b, s).value().values() == m.s2f(b, s).value().values());
}

TEST_CASE("shared encoder preserves length and rejects bad widths") {
  Model m(tiny(), 2);
  Rng rng(2);
  Tape tape;
  Binder b(tape, {});
  CHECK(m.shared(b, tape.constant(random_tensor(rng, {7, 8}, 1.0))).shape() == Shape{7, 16});
  CHECK_THROWS_AS(m.shared(b, tape.constant(Tensor({7, 5}))), ShapeError);
}

TEST_CASE("transducer lattice shape and causality") {
  Model m(tiny(), 3);
  Rng rng(3);
  Tape tape;
  Binder b(tape, {});
  Var h = m.shared(b, tape.constant(random_tensor(rng, {4, 8}, 1.0)));
  std::vector<int> y{10, 20, 30};
  Tensor a = m.rnnt_logits(b, h, y).value();
  CHECK(a.shape() == Shape{4 * 4, kTransducerVocab});
  // changing label u (0-based index 1) only affects prediction rows with
  // prefix length > 1, i.e. u' >= 2
  std::vector<int> y2{10, 99, 30};
  Tensor c = m.rnnt_logits(b, h, y2).value();
  for (int64_t t = 0; t < 4; ++t)
    for (int64_t u = 0; u <= 3; ++u) {
      bool same = true;
      for (int64_t k = 0; k < kTransducerVocab; ++k) same = same && a(t * 4 + u, k) == c(t * 4 + u, k);
      CHECK(same == (u < 2));
    }
}

TEST_CASE("incremental decoding helpers agree with the lattice") {
  Model m(tiny(), 4);
  Rng rng(4);
  Tape tape;
  Binder b(tape, {});
  Var h = m.shared(b, tape.constant(random_tensor(rng, {3, 8}, 1.0)));
  std::vector<int> y{65, 200};
  Tensor lat = m.rnnt_logits(b, h, y).value();
  Tensor enc = m.encoder_projection(h.value());
  PredState s = m.pred_start();
  std::vector<double> row(kTransducerVocab);
  for (int64_t u = 0; u <= 2; ++u) {
    for (int64_t t = 0; t < 3; ++t) {
      m.joint_logits(enc.row_span(t), s, row);
      for (int64_t k = 0; k < kTransducerVocab; ++k) CHECK(row[k] == doctest::Approx(lat(t * 3 + u, k)).epsilon(1e-12));
    }
    if (u < 2) s = m.pred_next(s, y[u]);
  }
}

TEST_CASE("text path contracts") {
  Model m(tiny(), 5);
  Tape tape;
  Binder b(tape, {});
  std::vector<int> toks{104, 105, kMaskToken};
  Var enc = m.text_encode(b, toks);
  CHECK(enc.shape() == Shape{3, 16});
  CHECK(m.mlm_logits(b, enc).shape() == Shape{3, 256});
  std::vector<int> bad{257};
  CHECK_THROWS_AS(m.text_encode(b, bad), ValueError);

  Var cond = m.condition(b, enc, LangId{1}, SpkId{0});
  CHECK(cond.shape() == Shape{3, 16 + 16});
  Var d = m.durations(b, cond);
  CHECK(d.shape() == Shape{3, 1});
  for (double v : d.value().values()) CHECK(v > 0.0);
  CHECK_THROWS_AS(m.condition(b, enc, LangId{4}, SpkId{0}), ValueError);
}

TEST_CASE("unknown speakers share the OOV row") {
  IdRegistry reg;
  reg.add_speaker("alice");
  Model m(tiny(), 6);
  Tape tape;
  Binder b(tape, {});
  std::vector<int> toks{97, 98};
  auto [l1, s1] = reg.lookup_ids("x", "nobody");
  auto [l2, s2] = reg.lookup_ids("y", "someone else");
  Var e = m.text_encode(b, toks);
  CHECK(m.condition(b, e, l1, s1).value().values() == m.condition(b, e, l2, s2).value().values());
}

TEST_CASE("duration rounding and upsampling") {
  CHECK(Model::round_durations(Tensor({2, 1}, {0.4, 2.6})) == std::vector<int>{1, 3});
  CHECK(Model::round_durations(Tensor({2, 1}, {2.5, 1.49})) == std::vector<int>{3, 1});
  Tape tape;
  Var e = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  std::vector<int> d{2, 3};
  Tensor up = Model::upsample(e, d).value();
  REQUIRE(up.shape() == Shape{5, 4});
  CHECK(up(0, 0) == 1);
  CHECK(up(1, 2) == 3);
  CHECK(up(2, 0) == 4);
  CHECK(up(4, 2) == 6);
  CHECK(up(0, 3) == 0.0);
  CHECK(up(1, 3) == 1.0);
  CHECK(up(2, 3) == 0.0);
  CHECK(up(3, 3) == 0.5);
  CHECK(up(4, 3) == 1.0);
  std::vector<int> ones{1, 1};
  Tensor id = Model::upsample(e, ones).value();
  CHECK(id(1, 1) == 5);
  std::vector<int> zero{1, 0};
  CHECK_THROWS_AS(Model::upsample(e, zero), ValueError);
}

TEST_CASE("decoder yields K refinements and uses the latent") {
  Model m(tiny(), 7);
  Rng rng(7);
  Tape tape;
  Binder b(tape, {});
  std::vector<int> toks{97, 98, 99};
  Var cond = m.condition(b, m.text_encode(b, toks), LangId{1}, SpkId{1});
  std::vector<int> d{2, 1, 3};
  Var up = Model::upsample(cond, d);
  auto outs = m.decode(b, up, tape.constant(random_tensor(rng, {1, 8}, 1.0)));
  REQUIRE(outs.size() == 2);
  CHECK(outs[1].shape() == Shape{6, 8});
  auto other = m.decode(b, up, tape.constant(random_tensor(rng, {1, 8}, 1.0)));
  double dist = 0;
  for (int64_t i = 0; i < outs[1].value().numel(); ++i) dist += std::abs(outs[1].value()[i] - other[1].value()[i]);
  CHECK(dist > 0.0);
  CHECK_THROWS_AS(m.decode(b, up, tape.constant(Tensor({1, 7}))), ShapeError);
}

TEST_CASE("gradient reaches decoder inputs through the shared encoder") {
  Model m(tiny(), 8);
  Tape tape;
  Binder b(tape, {Group::kText, Group::kDecoder});
  std::vector<int> toks{97, 98};
  Var cond = m.condition(b, m.text_encode(b, toks), LangId{0}, SpkId{0});
  std::vector<int> d{2, 2};
  auto outs = m.decode(b, Model::upsample(cond, d), tape.constant(Tensor({1, 8})));
  Var h = m.shared(b, outs.back());
  std::vector<int> y{97, 98};
  tape.backward(rnnt_loss(m.rnnt_logits(b, h, y), h.rows(), y));
  CHECK(m.params().grad_norm(Group::kDecoder) > 0.0);
  CHECK(m.params().grad_norm(Group::kText) > 0.0);
  CHECK(m.params().grad_norm(Group::kShared) == 0.0);
  CHECK(m.params().grad_norm(Group::kRnnt) == 0.0);
}

TEST_CASE("vae posterior") {
  Model m(tiny(), 9);
  Rng rng(9);
  Tape tape;
  Binder b(tape, {});
  Tensor z = random_tensor(rng, {5, 8}, 1.0);
  Posterior p = m.vae_posterior(b, tape.constant(z));
  CHECK(p.mu.shape() == Shape{1, 8});
  CHECK(p.logvar.shape() == Shape{1, 8});
  CHECK(m.vae_posterior(b, tape.constant(z)).mu.value().values() == p.mu.value().values());
}

TEST_CASE("pseudo-vocoder fit on an exact linear process") {
  Model m(tiny(), 10);
  Rng rng(10);
  Tensor A = random_tensor(rng, {9, 32}, 1.0);
  std::vector<Tensor> feats, sigs;
  for (int u = 0; u < 20; ++u) {
    Tensor z = random_tensor(rng, {6, 8}, 1.0);
    Tensor y({6, 32});
    for (int64_t t = 0; t < 6; ++t)
      for (int64_t j = 0; j < 32; ++j) {
        double s = A(8, j);
        for (int64_t i = 0; i < 8; ++i) s += z(t, i) * A(i, j);
        y(t, j) = s;
      }
    feats.push_back(z);
    sigs.push_back(y.reshaped({12, 16}));
  }
  m.vocoder().fit(feats, sigs);
  CHECK(m.vocoder().frozen());
  for (size_t u = 0; u < feats.size(); ++u) {
    Tensor out = m.vocoder().apply(feats[u]);
    REQUIRE(out.shape() == Shape{12, 16});
    for (int64_t f = 0; f < 12; ++f) {
      double r = 0;
      for (int64_t j = 0; j < 16; ++j) r += std::pow(out(f, j) - sigs[u](f, j), 2);
      CHECK(std::sqrt(r) < 1e-6);
    }
  }
  CHECK_THROWS_AS(m.vocoder().fit(feats, sigs), StateError);

  Model m2(tiny(), 11);
  std::vector<Tensor> flat;
  for (const auto& z : feats) {
    Tensor c = z;
    for (int64_t t = 0; t < c.rows(); ++t) c(t, 3) = 2.0 * c(t, 1);
    flat.push_back(c);
  }
  CHECK_THROWS_AS(m2.vocoder().fit(flat, sigs), ValueError);
  std::vector<Tensor> few(feats.begin(), feats.begin() + 2), few_s(sigs.begin(), sigs.begin() + 2);
  CHECK_THROWS_AS(m2.vocoder().fit(few, few_s), ValueError);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  Model m(tiny(), 12);
  m.tts_trained_langs() = {1, 3};
  Checkpoint ck;
  ck.stage = 2;
  ck.step = 77;
  ck.registry.add_language("lang_A0");
  ck.registry.add_speaker("spk");
  ck.meta["note"] = "x";
  store_model(ck, m);
  std::vector<Parameter*> g = m.params().group(Group::kRnnt);
  AdamState st(g, {});
  st.step_count = 5;
  st.first_moment[0].fill(0.25);
  store_optim(ck, "adam.rnnt", g, st);
  const fs::path p = fs::temp_directory_path() / "jstts_ck_test.ckpt";
  write_checkpoint(p, ck);
  CHECK_FALSE(fs::exists(fs::path(p.string() + ".tmp")));
  Checkpoint back = read_checkpoint(p);
  CHECK(back.stage == 2);
  CHECK(back.step == 77);
  CHECK(back.registry == ck.registry);
  CHECK(back.meta == ck.meta);
  Model m2(back.model_config, 999);
  load_model(back, m2);
  for (Group grp : kAllGroups) CHECK(m2.params().checksum(grp) == m.params().checksum(grp));
  CHECK(group_checksum(back, Group::kS2F) == m.params().checksum(Group::kS2F));
  CHECK(m2.tts_trained_langs() == std::set<int>{1, 3});
  AdamState st2(m2.params().group(Group::kRnnt), {});
  CHECK(load_optim(back, "adam.rnnt", m2.params().group(Group::kRnnt), st2));
  CHECK(st2.step_count == 5);
  CHECK(st2.first_moment[0][0] == 0.25);

  ModelConfig other = tiny();
  other.hidden = 32;
  Model m3(other, 1);
  CHECK_THROWS_AS(load_model(back, m3), ValueError);
  {
    std::ofstream os(p, std::ios::binary);
    os << "garbage";
  }
  CHECK_THROWS_AS(read_checkpoint(p), ValueError);
  fs::remove(p);
}
