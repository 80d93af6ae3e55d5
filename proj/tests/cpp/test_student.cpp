#include "regionbag/student.hpp"

#include "regionbag/alignment.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "test_util.hpp"

using namespace regionbag;
using ad::Matrix;

namespace {

StudentConfig tiny_student_config() {
  StudentConfig cfg;
  cfg.words_per_region = 3;
  cfg.word_dim = 16;
  cfg.embed_dim = 16;
  cfg.roi_bins = 2;
  cfg.backbone_channels = {8, 8, 4};
  cfg.backbone_strides = {2, 2, 1};
  return cfg;
}

VlmConfig tiny_vlm_config() {
  VlmConfig cfg;
  cfg.dim = 16;
  cfg.heads = 4;
  cfg.mlp_hidden = 32;
  cfg.input_side = 32;
  cfg.patch = 8;
  cfg.max_text_len = 32;
  return cfg;
}

ImageU8 gradient_image(int w, int h) {
  ImageU8 img = ImageU8::filled(w, h, 0, 0, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(x, y, 0) = uint8_t((x * 255) / w);
      img.at(x, y, 1) = uint8_t((y * 255) / h);
      img.at(x, y, 2) = uint8_t(((x + y) * 255) / (w + h));
    }
  return img;
}

}  // namespace

TEST_CASE("region_features basics") {
  StudentDetector det(tiny_student_config(), 3);
  const ImageU8 img = gradient_image(32, 32);
  ad::Tape tape;
  nn::Ctx ctx{tape, false};
  const auto fm = det.backbone(ctx, img);
  CHECK(fm.gw == 8);
  CHECK(fm.gh == 8);

  SUBCASE("row count and duplicate boxes") {
    const Box a{4, 4, 16, 16};
    const Box b{10, 8, 26, 28};
    nn::Val feats = det.region_features(ctx, fm, {a, b, a});
    const Matrix& v = tape.value(feats);
    CHECK(v.rows() == 3);
    CHECK(v.cols() == det.config().feature_dim());
    CHECK((v.row(0) - v.row(2)).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("boxes may extend past the image") {
    nn::Val feats = det.region_features(ctx, fm, {Box{-10, -10, 12, 12}});
    CHECK(tape.value(feats).allFinite());
  }

  SUBCASE("constant-zero image: equal rows for interior boxes of any placement") {
    const ImageU8 zeros = ImageU8::filled(32, 32, 0, 0, 0);
    ad::Tape t2;
    nn::Ctx c2{t2, false};
    const auto fm2 = det.backbone(c2, zeros);
    // interior boxes away from the border effects of padding
    nn::Val feats = det.region_features(c2, fm2, {Box{8, 8, 16, 16}, Box{14, 12, 22, 16}});
    const Matrix& v = t2.value(feats);
    CHECK((v.row(0) - v.row(1)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("project_to_pseudo_words is a plain linear map") {
  StudentDetector det(tiny_student_config(), 4);
  const int F = det.config().feature_dim();
  ad::Tape tape;
  nn::Ctx ctx{tape, false};
  Rng rng(5);

  // zero the bias so additivity is exact
  det.params().find("word_proj.b")->value.setZero();
  const Matrix a = rbtest::random_matrix(1, F, rng);
  const Matrix b = rbtest::random_matrix(1, F, rng);
  const Matrix zero = Matrix::Zero(1, F);

  auto project = [&](const Matrix& x) {
    return tape.value(det.project_to_pseudo_words(ctx, tape.constant(x)));
  };
  CHECK(project(zero).cwiseAbs().maxCoeff() == 0.0);
  const Matrix pa = project(a), pb = project(b), pab = project(a + b);
  CHECK((pab - (pa + pb)).cwiseAbs().maxCoeff() < 1e-12);

  SUBCASE("default shape is 6 x 64") {
    StudentDetector full(StudentConfig{}, 1);
    ad::Tape t2;
    nn::Ctx c2{t2, false};
    const Matrix f = rbtest::random_matrix(1, full.config().feature_dim(), rng);
    nn::Val words =
        full.region_words(c2, full.project_to_pseudo_words(c2, t2.constant(f)), 0);
    CHECK(t2.value(words).rows() == 6);
    CHECK(t2.value(words).cols() == 64);
  }
}

TEST_CASE("spatial positional embedding") {
  StudentDetector det(tiny_student_config(), 6);
  const Box enc{10, 10, 60, 50};
  const Box region{15, 20, 30, 35};

  SUBCASE("deterministic and translation invariant") {
    const Eigen::RowVectorXd a = det.spatial_positional_embedding(region, enc);
    const Eigen::RowVectorXd b = det.spatial_positional_embedding(region, enc);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
    const double dx = 17.5, dy = -4.25;
    const Box region_t{region.x1 + dx, region.y1 + dy, region.x2 + dx, region.y2 + dy};
    const Box enc_t{enc.x1 + dx, enc.y1 + dy, enc.x2 + dx, enc.y2 + dy};
    const Eigen::RowVectorXd c = det.spatial_positional_embedding(region_t, enc_t);
    CHECK((a - c).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(a.size() == det.config().word_dim);
  }

  SUBCASE("eight neighbor positions yield distinct embeddings") {
    const Box p{30, 30, 40, 40};
    std::vector<Box> all = {p};
    for (const auto& [ox, oy] : kDirectionOffsets)
      all.push_back(Box{p.x1 + ox * 10.0, p.y1 + oy * 10.0, p.x2 + ox * 10.0,
                        p.y2 + oy * 10.0});
    const Box enc_all = enclosing_box(all);
    std::vector<Eigen::RowVectorXd> pes;
    for (size_t i = 1; i < all.size(); ++i)
      pes.push_back(det.spatial_positional_embedding(all[i], enc_all));
    for (size_t i = 0; i < pes.size(); ++i) {
      for (size_t j = i + 1; j < pes.size(); ++j) {
        const double cos = pes[i].dot(pes[j]) / (pes[i].norm() * pes[j].norm());
        CHECK(cos < 1.0 - 1e-6);
      }
    }
  }
}

TEST_CASE("word dropout keeps at least one word") {
  StudentConfig cfg = tiny_student_config();
  cfg.words_per_region = 6;

  SUBCASE("p_drop = 0 is identity") {
    cfg.p_drop = 0.0;
    StudentDetector det(cfg, 1);
    Rng rng(2);
    CHECK(det.word_dropout_keep(rng) == std::vector<int>{0, 1, 2, 3, 4, 5});
  }

  SUBCASE("p_drop = 1 keeps exactly one word") {
    cfg.p_drop = 1.0;
    StudentDetector det(cfg, 1);
    Rng rng(3);
    for (int t = 0; t < 50; ++t) CHECK(det.word_dropout_keep(rng).size() == 1);
  }

  SUBCASE("mean retained matches the truncated binomial") {
    cfg.p_drop = 0.5;
    StudentDetector det(cfg, 1);
    Rng rng(4);
    const int trials = 10000;
    double total = 0;
    for (int t = 0; t < trials; ++t) total += double(det.word_dropout_keep(rng).size());
    const double mean = total / trials;
    // E[kept] = 6 * 0.5 + P(all dropped) * 1 = 3 + 2^-6
    const double want = 3.0 + std::pow(0.5, 6);
    const double sigma = std::sqrt(1.5 / trials);  // Var(Bin(6, .5)) = 1.5
    CHECK(std::abs(mean - want) <= 3 * sigma + 1e-9);
  }
}

TEST_CASE("bag and individual student embeddings") {
  const FrozenVLM vlm(tiny_vlm_config(), Vocab::build(default_catalog().names()), 8);
  StudentDetector det(tiny_student_config(), 9);
  Rng rng(10);
  const int W = det.config().words_per_region;
  const int D = det.config().word_dim;

  SUBCASE("unit norm and PE-off single-region reduction") {
    ad::Tape tape;
    nn::Ctx ctx{tape, false};
    const Matrix words = rbtest::random_matrix(W, D, rng, 0.3);
    nn::Val bag = bag_student_embedding(ctx, vlm, {tape.constant(words)}, {});
    CHECK(tape.value(bag).row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));
    const Eigen::VectorXd direct = vlm.encode_text_embeddings(words, TextLayer::kFinal);
    CHECK((tape.value(bag).row(0).transpose() - direct).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("permuting bag regions changes the embedding") {
    ad::Tape tape;
    nn::Ctx ctx{tape, false};
    const Matrix w1 = rbtest::random_matrix(W, D, rng, 0.3);
    const Matrix w2 = rbtest::random_matrix(W, D, rng, 0.3);
    const Box b1{0, 0, 10, 10}, b2{10, 0, 20, 10};
    const Box enc = enclosing_box({b1, b2});
    const auto pe1 = det.spatial_positional_embedding(b1, enc);
    const auto pe2 = det.spatial_positional_embedding(b2, enc);
    nn::Val fwd = bag_student_embedding(ctx, vlm, {tape.constant(w1), tape.constant(w2)},
                                        {pe1, pe2});
    nn::Val rev = bag_student_embedding(ctx, vlm, {tape.constant(w2), tape.constant(w1)},
                                        {pe1, pe2});
    const double cos = tape.value(fwd).row(0).dot(tape.value(rev).row(0));
    CHECK(cos < 1.0 - 1e-6);
  }

  SUBCASE("individual embedding: duplication invariance and unit norm") {
    ad::Tape tape;
    nn::Ctx ctx{tape, false};
    const Matrix one = rbtest::random_matrix(1, D, rng, 0.3);
    Matrix repeated(4, D);
    for (int r = 0; r < 4; ++r) repeated.row(r) = one.row(0);
    nn::Val a = individual_student_embedding(ctx, vlm, tape.constant(one));
    nn::Val b = individual_student_embedding(ctx, vlm, tape.constant(repeated));
    CHECK(tape.value(a).row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));
    // identical words at different positions pick up different positional
    // embeddings, so require closeness rather than equality
    CHECK(tape.value(a).row(0).dot(tape.value(b).row(0)) > 0.8);
  }
}

TEST_CASE("classify_region") {
  const FrozenVLM vlm(tiny_vlm_config(), Vocab::build(default_catalog().names()), 12);
  Rng rng(13);
  const Matrix words = rbtest::random_matrix(3, 16, rng, 0.4);

  SUBCASE("hand-computed softmax at tau=1 with cosines (0.8, 0.2, bg 0)") {
    const Eigen::VectorXd t =
        vlm.encode_text_embeddings(words, TextLayer::kPenultimate);
    // orthonormal helpers against t
    Eigen::VectorXd u = Eigen::VectorXd::Zero(16);
    u(0) = 1.0;
    u -= u.dot(t) * t;
    u.normalize();
    Eigen::VectorXd w = Eigen::VectorXd::Zero(16);
    w(1) = 1.0;
    w -= w.dot(t) * t;
    w -= w.dot(u) * u;
    w.normalize();
    Matrix cats(2, 16);
    cats.row(0) = (0.8 * t + std::sqrt(1 - 0.64) * u).transpose();
    cats.row(1) = (0.2 * t + std::sqrt(1 - 0.04) * u).transpose();
    const Eigen::VectorXd bg = w;  // cosine 0 with t
    const Eigen::VectorXd probs = classify_region(vlm, words, cats, &bg, 1.0);
    REQUIRE(probs.size() == 3);
    CHECK(probs(0) == doctest::Approx(0.5005).epsilon(1e-3));
    CHECK(probs(1) == doctest::Approx(0.2747).epsilon(1e-3));
    CHECK(probs(2) == doctest::Approx(0.2249).epsilon(1e-3));
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("all-equal cosines give the uniform distribution") {
    const Eigen::VectorXd t = vlm.encode_text_embeddings(words, TextLayer::kPenultimate);
    Matrix cats(3, 16);
    for (int r = 0; r < 3; ++r) cats.row(r) = t.transpose();
    const Eigen::VectorXd bg = t;
    const Eigen::VectorXd probs = classify_region(vlm, words, cats, &bg, 50.0);
    for (int i = 0; i < 4; ++i) CHECK(probs(i) == doctest::Approx(0.25).epsilon(1e-9));
  }

  SUBCASE("C-way form without background") {
    Matrix cats = rbtest::random_unit_rows(5, 16, rng);
    const Eigen::VectorXd probs = classify_region(vlm, words, cats, nullptr, 10.0);
    CHECK(probs.size() == 5);
    CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("argmax invariant to rescaling absorbed into tau") {
    Matrix cats = rbtest::random_unit_rows(4, 16, rng);
    const Eigen::VectorXd bg = rbtest::random_unit_rows(1, 16, rng).row(0).transpose();
    const Eigen::VectorXd p1 = classify_region(vlm, words, cats, &bg, 25.0);
    const Eigen::VectorXd p2 = classify_region(vlm, words, cats, &bg, 50.0);
    int a1, a2;
    p1.maxCoeff(&a1);
    p2.maxCoeff(&a2);
    CHECK(a1 == a2);
  }
}

TEST_CASE("box delta parametrization round-trips") {
  Rng rng(14);
  for (int t = 0; t < 100; ++t) {
    const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
    const Box p{x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)};
    const double gx = rng.uniform(0, 50), gy = rng.uniform(0, 50);
    const Box g{gx, gy, gx + rng.uniform(5, 30), gy + rng.uniform(5, 30)};
    const Box back = apply_box_deltas(p, box_delta_targets(p, g));
    CHECK(back.x1 == doctest::Approx(g.x1).epsilon(1e-9));
    CHECK(back.y2 == doctest::Approx(g.y2).epsilon(1e-9));
  }
}

TEST_CASE("student end-to-end gradient check through all three loss paths") {
  const FrozenVLM vlm(tiny_vlm_config(), Vocab::build(default_catalog().names()), 15);
  StudentDetector det(tiny_student_config(), 16);
  const ImageU8 img = gradient_image(32, 32);
  const Box region{6, 6, 22, 22};
  const Box neighbor{14, 6, 30, 22};
  const Box enc = enclosing_box({region, neighbor});
  const Matrix cat_embs = [&]() {
    Rng r(1);
    return rbtest::random_unit_rows(3, 16, r);
  }();
  const Matrix f_v = [&]() {
    Rng r(2);
    return rbtest::random_unit_rows(1, 16, r);
  }();
  const Matrix g_v = [&]() {
    Rng r(3);
    return rbtest::random_unit_rows(1, 16, r);
  }();

  auto build = [&](ad::Tape& tape, bool trainable) {
    nn::Ctx ctx{tape, trainable};
    const auto fm = det.backbone(ctx, img);
    nn::Val feats = det.region_features(ctx, fm, {region, neighbor});
    nn::Val words_all = det.project_to_pseudo_words(ctx, feats);
    nn::Val w0 = det.region_words(ctx, words_all, 0);
    nn::Val w1 = det.region_words(ctx, words_all, 1);
    // classification CE on region 0
    nn::Val logits = classify_region_logits(
        ctx, vlm, w0, cat_embs,
        trainable ? tape.param(det.background_embedding())
                  : tape.constant(det.background_embedding().value),
        20.0);
    nn::Val l_cls = cross_entropy_from_logits(ctx, logits, 1);
    // bag loss with one bag of two regions
    const auto pe0 = det.spatial_positional_embedding(region, enc);
    const auto pe1 = det.spatial_positional_embedding(neighbor, enc);
    nn::Val f_t = bag_student_embedding(ctx, vlm, {w0, w1}, {pe0, pe1});
    nn::Val l_bag = bag_infonce(ctx, f_t, tape.constant(f_v), Matrix(0, 16),
                                Matrix(0, 16), 5.0);
    // individual loss on region 0
    nn::Val g_t = individual_student_embedding(ctx, vlm, w0);
    nn::Val l_ind = individual_infonce(ctx, g_t, tape.constant(g_v), Matrix(0, 16),
                                       Matrix(0, 16), 5.0);
    return ad::add_n({l_cls, l_bag, l_ind});
  };

  auto eval = [&]() {
    ad::Tape tape;
    return tape.value(build(tape, false))(0, 0);
  };
  det.params().zero_grad();
  {
    ad::Tape tape;
    tape.backward(build(tape, true));
  }
  Rng rng(17);
  const double worst = rbtest::sampled_group_fd_err(det.params().all(), eval, rng, 5);
  CHECK(worst <= 1e-4);
}

TEST_CASE("student checkpoint reload is bit stable") {
  StudentDetector det(tiny_student_config(), 21);
  const std::string path =
      (std::filesystem::temp_directory_path() / "rb_student_test.ckpt").string();
  det.save(path);
  auto back = StudentDetector::load(path);
  REQUIRE(back->params().all().size() == det.params().all().size());
  for (size_t i = 0; i < det.params().all().size(); ++i) {
    CHECK((det.params().all()[i]->value - back->params().all()[i]->value)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  std::filesystem::remove(path);
}
