#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

using namespace fedsim;

namespace {

Model two_layer_toy() {
  Model m;
  m.input_shape = {1, 4, 4};
  m.layers.push_back(Layer::conv2d(1, 2, 3, 1, 1));
  m.layers.push_back(Layer::relu());
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::dense(2 * 4 * 4, 3));
  return m;
}

}  // namespace

TEST_CASE("tensor shape/data consistency is enforced") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.all_finite());
}

TEST_CASE("flatten/unflatten round-trips exactly") {
  Model m = init_model_params(two_layer_toy(), 42);
  FlatParams flat = flatten_params(m);
  CHECK(flat.size() == m.parameter_count());
  Model back = unflatten_params(m, flat);
  CHECK(back.same_bits(m));
}

TEST_CASE("flatten of a zero-initialized model is the zero vector") {
  Model m = two_layer_toy();
  FlatParams flat = flatten_params(m);
  CHECK(flat.size() == m.parameter_count());
  for (double v : flat.values) CHECK(v == 0.0);
}

TEST_CASE("flat layout is layer order, weights before bias") {
  // A tiny model small enough to lay out by hand: conv 1->1 k1 (1 weight +
  // 1 bias), then dense 1->2 (2 weights + 2 bias).
  Model m;
  m.input_shape = {1, 1, 1};
  m.layers.push_back(Layer::conv2d(1, 1, 1, 1, 0));
  m.layers.push_back(Layer::flatten());
  m.layers.push_back(Layer::dense(1, 2));
  m.layers[0].weights.data = {10.0};
  m.layers[0].bias.data = {11.0};
  m.layers[2].weights.data = {20.0, 21.0};
  m.layers[2].bias.data = {22.0, 23.0};
  FlatParams flat = flatten_params(m);
  std::vector<double> expected = {10.0, 11.0, 20.0, 21.0, 22.0, 23.0};
  CHECK(flat.values == expected);
}

TEST_CASE("unflatten rejects wrong lengths") {
  Model m = two_layer_toy();
  FlatParams flat;
  flat.values.assign(m.parameter_count() + 1, 0.0);
  CHECK_THROWS_AS(unflatten_params(m, flat), std::invalid_argument);
}

TEST_CASE("validate rejects non-composing layer chains") {
  Model m;
  m.input_shape = {1, 4, 4};
  m.layers.push_back(Layer::conv2d(2, 2, 3, 1, 1));  // expects 2 input channels
  CHECK_THROWS_WITH_AS(m.validate(), doctest::Contains("conv2d"), std::runtime_error);

  Model d;
  d.input_shape = {1, 4, 4};
  d.layers.push_back(Layer::flatten());
  d.layers.push_back(Layer::dense(15, 3));  // flatten gives 16
  CHECK_THROWS_WITH_AS(d.validate(), doctest::Contains("dense"), std::runtime_error);
}

TEST_CASE("model JSON document round-trips bit-for-bit") {
  Model m = init_model_params(two_layer_toy(), 7);
  std::string doc = model_to_json(m);
  Model back = model_from_json(doc);
  CHECK(back.same_bits(m));
  CHECK(model_to_json(back) == doc);
}

TEST_CASE("model JSON save/load through a file") {
  namespace fs = std::filesystem;
  fs::path path = fs::temp_directory_path() / "fedsim_model_test.json";
  Model m = init_model_params(two_layer_toy(), 3);
  save_model(m, path.string());
  Model back = load_model(path.string());
  CHECK(back.same_bits(m));
  fs::remove(path);
}

TEST_CASE("model JSON rejects malformed documents") {
  CHECK_THROWS(model_from_json("{\"version\":2,\"input_shape\":[1,1,1],\"layers\":[]}"));
  CHECK_THROWS(model_from_json("{\"version\":1,\"input_shape\":[1,1,1],\"layers\":[{\"kind\":\"pool\"}]}"));
}

TEST_CASE("parameter_count sums weights and biases") {
  Model m = two_layer_toy();
  // conv: 2*1*3*3 + 2 = 20; dense: 3*32 + 3 = 99.
  CHECK(m.parameter_count() == 119);
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::stream(1, "x", 2, 3);
  Rng b = Rng::stream(1, "x", 2, 3);
  Rng c = Rng::stream(1, "x", 2, 4);
  bool differs = false;
  for (int i = 0; i < 16; ++i) {
    auto va = a.next_u64();
    CHECK(va == b.next_u64());
    if (va != c.next_u64()) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("rng distributions stay in range") {
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(rng.below(7) < 7);
    CHECK(rng.gamma(0.5) > 0.0);
  }
  std::vector<double> alpha{0.5, 1.5, 3.0};
  auto d = rng.dirichlet(alpha);
  double sum = 0.0;
  for (double p : d) {
    CHECK(p >= 0.0);
    sum += p;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}
