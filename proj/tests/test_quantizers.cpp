#include "doctest.h"

#include "qcnn/quant_config.hpp"
#include "qcnn/quantizers.hpp"
#include "quant_checks.hpp"

using namespace qcnn;
using namespace qcnn::testing;
using doctest::Approx;

namespace {
RowArr row(std::initializer_list<float> v) {
  RowArr r(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (float x : v) r(0, i++) = x;
  return r;
}
}  // namespace

TEST_CASE("sign_binarize") {
  CHECK(quant::sign_binarize(row({0.0f}))(0, 0) == 1.0f);
  const RowArr s = quant::sign_binarize(row({-0.3f, 0.7f}));
  CHECK(s(0, 0) == -1.0f);
  CHECK(s(0, 1) == 1.0f);
  CHECK(quant::sign_binarize(row({-0.0f}))(0, 0) == 1.0f);
}

TEST_CASE("linear_quantize") {
  CHECK(quant::linear_quantize(row({0.3f}), 2, -1.0f, 0.5f)(0, 0) == 0.5f);
  CHECK(quant::linear_quantize(row({0.9f}), 2, -1.0f, 0.5f)(0, 0) == 0.5f);
  CHECK(quant::linear_quantize(row({-3.0f}), 2, -1.0f, 0.5f)(0, 0) == -1.0f);
  // half-way rounds away from zero: 0.25 * 2 = 0.5 -> 1
  CHECK(quant::linear_quantize(row({0.25f}), 2, -1.0f, 0.5f)(0, 0) == 0.5f);
  CHECK(quant::linear_quantize(row({-0.25f}), 2, -1.0f, 0.5f)(0, 0) == -0.5f);
  CHECK_THROWS_AS(quant::linear_quantize(row({0.1f}), 1, -1.0f, 1.0f), ContractError);
  CHECK_THROWS_AS(quant::linear_quantize(row({0.1f}), 32, -1.0f, 1.0f), ContractError);
  CHECK_THROWS_AS(quant::linear_quantize(row({0.1f}), 2, 1.0f, 1.0f), ContractError);
}

TEST_CASE("xnor_weight_quantize") {
  const auto q = quant::xnor_weight_quantize(row({0.5f, -1.0f, 1.5f}));
  CHECK(q.binary(0, 0) == 1.0f);
  CHECK(q.binary(0, 1) == -1.0f);
  CHECK(q.binary(0, 2) == 1.0f);
  CHECK(q.alpha[0] == Approx(1.0));

  const auto c = quant::xnor_weight_quantize(row({0.25f, 0.25f, 0.25f, 0.25f}));
  CHECK((c.binary == 1.0f).all());
  CHECK(c.alpha[0] == 0.25f);

  RowArr two(2, 2);
  two << 1, -3, 0.5f, 0.5f;
  const auto t = quant::xnor_weight_quantize(two);
  CHECK(t.alpha[0] == 2.0f);
  CHECK(t.alpha[1] == 0.5f);
  CHECK_THROWS_AS(quant::xnor_weight_quantize(RowArr(0, 0)), ContractError);
}

TEST_CASE("dorefa weights") {
  const auto one = quant::dorefa_weight_quantize(row({0.2f, -0.4f}), 1);
  const RowArr e = one.effective();
  CHECK(one.scale[0] == Approx(0.3));
  CHECK(e(0, 0) == Approx(0.3));
  CHECK(e(0, 1) == Approx(-0.3));

  const RowArr w = row({0.0f, 0.0f, 0.8f, 0.0f});
  const RowArr q2 = quant::dorefa_weight_quantize(w, 2).effective();
  CHECK(q2(0, 0) == Approx(1.0 / 3.0));
  CHECK(q2(0, 2) == Approx(1.0));

  CHECK_THROWS_AS(quant::dorefa_weight_quantize(w, 5), ConfigError);
  CHECK_THROWS_AS(quant::dorefa_weight_quantize(w, 32), ConfigError);

  std::mt19937_64 rng(11);
  for (int bits : {2, 3, 4, 8}) {
    const RowArr x = random_rows(rng, 4, 50, -3, 3);
    const RowArr q = quant::dorefa_weight_quantize(x, bits).effective();
    CHECK(q.maxCoeff() <= 1.0f);
    CHECK(q.minCoeff() >= -1.0f);
  }
}

TEST_CASE("dorefa activations") {
  CHECK(quant::dorefa_activation_quantize(row({0.5f}), 2)(0, 0) == Approx(2.0 / 3.0));
  for (int bits : {1, 2, 3, 4, 8}) {
    CHECK(quant::dorefa_activation_quantize(row({-0.7f}), bits)(0, 0) == 0.0f);
    CHECK(quant::dorefa_activation_quantize(row({1.3f}), bits)(0, 0) == 1.0f);
  }
  CHECK(quant::dorefa_activation_quantize(row({0.49f}), 1)(0, 0) == 0.0f);
  CHECK(quant::dorefa_activation_quantize(row({0.5f}), 1)(0, 0) == 1.0f);
  CHECK_THROWS_AS(quant::dorefa_activation_quantize(row({0.5f}), 6), ConfigError);
}

TEST_CASE("twn ternarization") {
  const RowArr t = quant::ternarize(row({0.8f, -0.05f, -0.9f}), 0.2f);
  CHECK(t(0, 0) == 1.0f);
  CHECK(t(0, 1) == 0.0f);
  CHECK(t(0, 2) == -1.0f);

  const auto z = quant::twn_ternarize(RowArr::Zero(1, 6));
  CHECK((z.ternary == 0.0f).all());
  CHECK(z.alpha[0] == 0.0f);

  // delta = 0.7 * mean(0.8, 0.05, 0.9) = 0.40833; alpha = (0.8 + 0.9) / 2
  const auto q = quant::twn_ternarize(row({0.8f, -0.05f, -0.9f}));
  CHECK(q.delta[0] == Approx(0.7 * 1.75 / 3));
  CHECK(q.alpha[0] == Approx(0.85));
  CHECK(q.ternary(0, 1) == 0.0f);
}

TEST_CASE("ttq ternarization and gradients") {
  const RowArr w = row({0.5f, -0.2f, -0.6f});
  const RowArr y = quant::ttq_apply(w, quant::TtqScales<float>{0.7f, 0.4f}, 0.3f);
  CHECK(y(0, 0) == 0.7f);
  CHECK(y(0, 1) == 0.0f);
  CHECK(y(0, 2) == -0.4f);
  CHECK(quant::ttq_threshold(w, 0.5f) == Approx(0.3));

  std::mt19937_64 rng(12);
  const RowArr x = random_rows(rng, 1, 40);
  CHECK(same(quant::ttq_apply(x, quant::TtqScales<float>{1.0f, 1.0f}, 0.3f), quant::ternarize(x, 0.3f)));
  CHECK_THROWS_AS(quant::ttq_apply(x, quant::TtqScales<float>{0.0f, 1.0f}, 0.3f), ContractError);

  const auto zero = quant::ttq_scale_gradients(RowArr::Zero(1, 3), w, 0.3f, quant::TtqScales<float>{0.7f, 0.4f});
  CHECK(zero.d_pos == 0.0f);
  CHECK(zero.d_neg == 0.0f);
  CHECK((zero.d_w == 0.0f).all());

  const auto single = quant::ttq_scale_gradients(row({2.5f}), row({0.9f}), 0.3f, quant::TtqScales<float>{0.7f, 0.4f});
  CHECK(single.d_pos == 2.5f);
  CHECK(single.d_neg == 0.0f);
  CHECK(single.d_w(0, 0) == Approx(2.5 * 0.7));

  const auto regions = quant::ttq_scale_gradients(row({1.0f, 1.0f, 1.0f}), w, 0.3f, quant::TtqScales<float>{0.7f, 0.4f});
  CHECK(regions.d_w(0, 0) == Approx(0.7));
  CHECK(regions.d_w(0, 1) == Approx(1.0));
  CHECK(regions.d_w(0, 2) == Approx(0.4));
  CHECK(regions.d_neg == -1.0f);

  for (int i = 0; i < 20; ++i) CHECK(ttq_scale_gradient_error(rng) < 1e-2);
}

TEST_CASE("randomized properties") {
  std::mt19937_64 rng(13);
  CHECK(xnor_optimality_failures(rng, 1000) == 0);
  CHECK(twn_optimality_failures(rng, 300) == 0);
  CHECK(twn_region_failures(rng, 300) == 0);
  CHECK(cardinality_failures(rng, 50) == 0);
  CHECK(idempotence_failures(rng, 50) == 0);
}

TEST_CASE("monotone and non-negative scales") {
  std::mt19937_64 rng(14);
  RowArr x = random_rows(rng, 1, 200, -2, 2);
  std::sort(x.data(), x.data() + x.size());
  auto monotone = [](const RowArr& y) {
    for (Eigen::Index i = 1; i < y.size(); ++i)
      if (y(0, i) < y(0, i - 1)) return false;
    return true;
  };
  CHECK(monotone(quant::sign_binarize(x)));
  CHECK(monotone(quant::linear_quantize(x, 3, -1.0f, 0.75f)));
  CHECK(monotone(quant::dorefa_activation_quantize(x, 2)));
  CHECK(monotone(quant::dorefa_weight_quantize(x, 3).effective()));
  CHECK(monotone(quant::twn_ternarize(x).ternary));
  CHECK(monotone(quant::ttq_ternarize(x, quant::TtqScales<float>{0.5f, 0.9f}, 0.05f)));

  const RowArr w = random_rows(rng, 8, 9);
  CHECK((quant::xnor_weight_quantize(w).alpha > 0).all());
  CHECK((quant::dorefa_weight_quantize(w, 1).scale > 0).all());
  CHECK((quant::twn_ternarize(w).alpha >= 0).all());
}

TEST_CASE("config legality") {
  CHECK_FALSE(illegal_reason(QuantMethod::QNN, 1, 1));
  CHECK_FALSE(illegal_reason(QuantMethod::DoReFa, 1, 32));
  CHECK_FALSE(illegal_reason(QuantMethod::XNORNet, 1, 32));
  CHECK_FALSE(illegal_reason(QuantMethod::XNORNet, 1, 1));
  CHECK(illegal_reason(QuantMethod::XNORNet, 2, 2));
  CHECK_FALSE(illegal_reason(QuantMethod::TWN, 2, 32));
  CHECK(illegal_reason(QuantMethod::TWN, 2, 2));
  CHECK(illegal_reason(QuantMethod::TTQ, 1, 32));
  CHECK(illegal_reason(QuantMethod::QNN, 5, 32));

  QuantConfig bad = QuantConfig::with_default_policy(QuantMethod::TTQ, 2, 8);
  try {
    validate(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("TTQ") != std::string::npos);
  }
  QuantConfig range = QuantConfig::with_default_policy(QuantMethod::QNN, 2, 2);
  range.min_v = 0.5f;
  range.max_v = 0.5f;
  CHECK_THROWS_AS(validate(range), ConfigError);

  CHECK(parse_method("BWN") == QuantMethod::XNORNet);
  CHECK(parse_method("DoReFa-Net") == QuantMethod::DoReFa);
  CHECK_THROWS_AS(parse_method("foo"), ConfigError);
}

TEST_CASE("first and last layer policy") {
  const auto qnn = QuantConfig::with_default_policy(QuantMethod::QNN, 1, 1);
  CHECK(qnn.quantize_first_layer);
  CHECK(layer_quant(qnn, LayerPosition::First).weight_bits == 1);
  const auto dorefa = QuantConfig::with_default_policy(QuantMethod::DoReFa, 1, 2);
  CHECK_FALSE(dorefa.quantize_first_layer);
  CHECK(layer_quant(dorefa, LayerPosition::First).full_precision());
  CHECK(layer_quant(dorefa, LayerPosition::Last).full_precision());
  CHECK(layer_quant(dorefa, LayerPosition::Middle).act_bits == 2);
  CHECK(linear_range(qnn, 2).second == 0.5f);
}
