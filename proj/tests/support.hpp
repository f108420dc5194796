#pragma once

// Helpers shared by the unit tests and the acceptance runner: random tensors,
// the per-primitive gradient-check cases and brute-force evaluation oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "clipa/masking.hpp"
#include "clipa/model.hpp"
#include "clipa/rng.hpp"
#include "clipa/tensor.hpp"
#include "clipa/training.hpp"

namespace clipa::testing {

inline Tensor random_tensor(const Shape& shape, CounterRng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(shape, std::move(v), requires_grad);
}

inline Tensor random_unit_rows(std::int64_t n, std::int64_t e, CounterRng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n * e));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < e; ++k) {
      v[static_cast<std::size_t>(i * e + k)] = rng.normal();
      s += v[static_cast<std::size_t>(i * e + k)] * v[static_cast<std::size_t>(i * e + k)];
    }
    for (std::int64_t k = 0; k < e; ++k) v[static_cast<std::size_t>(i * e + k)] /= std::sqrt(s);
  }
  return Tensor::from({n, e}, std::move(v));
}

// Reduces any output to a scalar through fixed random weights so every
// output element carries a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& out, CounterRng& rng) {
  const Tensor w = random_tensor(out.shape(), rng, 1.0, false);
  return sum(mul(out, w));
}

inline std::int64_t dims(CounterRng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

struct GradCase {
  std::string name;
  // Builds a random instance from the seed and returns the grad_check error.
  std::function<double(std::uint64_t)> run;
};

inline double check(std::vector<Tensor> params, const std::function<Tensor()>& f) { return grad_check(f, params); }

inline std::vector<GradCase> primitive_grad_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<double(CounterRng&)> body) {
    cases.push_back({name, [body, name](std::uint64_t seed) {
                       PrecisionScope f64(Precision::f64);
                       CounterRng rng(seed, fnv1a64(name));
                       return body(rng);
                     }});
  };

  add_case("add", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 4)}, r), b = random_tensor(a.shape(), r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(add(a, b), w)); });
  });
  add_case("add_broadcast", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4)}, r);
    auto b = random_tensor({a.dim(2)}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(add(a, b), w)); });
  });
  add_case("sub", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 4)}, r), b = random_tensor({a.dim(1)}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(sub(a, b), w)); });
  });
  add_case("mul", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 4)}, r), b = random_tensor(a.shape(), r);
    return check({a, b}, [=] { return sum(mul(a, b)); });
  });
  add_case("scale", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    const double s = r.normal();
    return check({a}, [=] { return sum(mul(scale(a, s), w)); });
  });
  add_case("add_scalar", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    const double s = r.normal();
    return check({a}, [=] { return sum(mul(add_scalar(a, s), w)); });
  });
  add_case("scale_by", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r), s = random_tensor({1}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a, s}, [=] { return sum(mul(scale_by(a, s), w)); });
  });
  add_case("square", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(square(a), w)); });
  });
  add_case("exp", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r, 0.5);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(exp(a), w)); });
  });
  add_case("matmul_2d", [](CounterRng& r) {
    const auto m = dims(r, 1, 4), k = dims(r, 1, 4), n = dims(r, 1, 4);
    auto a = random_tensor({m, k}, r), b = random_tensor({k, n}, r);
    auto w = random_tensor({m, n}, r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(matmul(a, b), w)); });
  });
  add_case("matmul_batched", [](CounterRng& r) {
    const auto bsz = dims(r, 1, 3), m = dims(r, 1, 3), k = dims(r, 1, 3), n = dims(r, 1, 3);
    auto a = random_tensor({bsz, m, k}, r), b = random_tensor({bsz, k, n}, r);
    auto w = random_tensor({bsz, m, n}, r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(matmul(a, b), w)); });
  });
  add_case("matmul_nd_2d", [](CounterRng& r) {
    const auto bsz = dims(r, 1, 3), m = dims(r, 1, 3), k = dims(r, 1, 3), n = dims(r, 1, 3);
    auto a = random_tensor({bsz, m, k}, r), b = random_tensor({k, n}, r);
    auto w = random_tensor({bsz, m, n}, r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(matmul(a, b), w)); });
  });
  add_case("softmax", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 2, 5)}, r);
    const int axis = static_cast<int>(r.below(2));
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(softmax(a, axis), w)); });
  });
  add_case("log_softmax", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 2, 5)}, r);
    const int axis = static_cast<int>(r.below(2));
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(log_softmax(a, axis), w)); });
  });
  add_case("layernorm", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 2, 6)}, r);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(layernorm(a), w)); });
  });
  add_case("gelu", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r, 2.0);
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(gelu(a), w)); });
  });
  add_case("l2_normalize", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 2, 5)}, r);
    const int axis = static_cast<int>(r.below(2));
    auto w = random_tensor(a.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(l2_normalize(a, axis), w)); });
  });
  add_case("transpose", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)}, r);
    const int x = static_cast<int>(r.below(3)), y = static_cast<int>(r.below(3));
    const Tensor probe = transpose(a.detach(), x, y);
    auto w = random_tensor(probe.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(transpose(a, x, y), w)); });
  });
  add_case("permute", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 2)}, r);
    std::vector<int> axes = {0, 1, 2, 3};
    for (int i = 3; i > 0; --i) std::swap(axes[static_cast<std::size_t>(i)], axes[r.below(static_cast<std::uint64_t>(i + 1))]);
    const Tensor probe = permute(a.detach(), axes);
    auto w = random_tensor(probe.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(permute(a, axes), w)); });
  });
  add_case("reshape", [](CounterRng& r) {
    const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
    auto a = random_tensor({m, n}, r);
    auto w = random_tensor({n, m}, r, 1.0, false);
    return check({a}, [=] { return sum(mul(reshape(a, {n, m}), w)); });
  });
  add_case("concat", [](CounterRng& r) {
    const int axis = static_cast<int>(r.below(2));
    const auto m = dims(r, 1, 3), n = dims(r, 1, 3), extra = dims(r, 1, 3);
    auto a = random_tensor({m, n}, r);
    auto b = random_tensor(axis == 0 ? Shape{extra, n} : Shape{m, extra}, r);
    const Tensor probe = concat(a.detach(), b.detach(), axis);
    auto w = random_tensor(probe.shape(), r, 1.0, false);
    return check({a, b}, [=] { return sum(mul(concat(a, b, axis), w)); });
  });
  add_case("gather_rows", [](CounterRng& r) {
    const auto rows = dims(r, 1, 5);
    auto a = random_tensor({rows, dims(r, 1, 3)}, r);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(dims(r, 1, 6)));
    for (auto& i : idx) i = static_cast<std::int64_t>(r.below(static_cast<std::uint64_t>(rows)));
    auto w = random_tensor({static_cast<std::int64_t>(idx.size()), a.dim(1)}, r, 1.0, false);
    return check({a}, [=] { return sum(mul(gather_rows(a, idx), w)); });
  });
  add_case("pick", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(a.dim(0)));
    for (auto& i : idx) i = static_cast<std::int64_t>(r.below(static_cast<std::uint64_t>(a.dim(1))));
    auto w = random_tensor({a.dim(0)}, r, 1.0, false);
    return check({a}, [=] { return sum(mul(pick(a, idx), w)); });
  });
  add_case("sum", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r);
    return check({a}, [=] { return square(sum(a)); });
  });
  add_case("mean", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 4), dims(r, 1, 4)}, r);
    return check({a}, [=] { return square(mean(a)); });
  });
  add_case("mean_axis", [](CounterRng& r) {
    auto a = random_tensor({dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)}, r);
    const int axis = static_cast<int>(r.below(3));
    const Tensor probe = mean_axis(a.detach(), axis);
    auto w = random_tensor(probe.shape(), r, 1.0, false);
    return check({a}, [=] { return sum(mul(mean_axis(a, axis), w)); });
  });
  return cases;
}

// A deliberately small CLIP so the end-to-end finite-difference check over
// every parameter stays fast.
inline ClipConfig micro_clip_config() {
  ModelConfig image;
  image.tower = Tower::image;
  image.layers = 2;
  image.width = 8;
  image.heads = 2;
  image.mlp_ratio = 2;
  image.embed_dim = 6;
  image.patch_size = 4;
  image.image_side = 8;
  ModelConfig text = image;
  text.tower = Tower::text;
  text.vocab_size = 7;
  text.context_length = 5;
  return {image, text};
}

// grad_check of the full contrastive loss (image masks, padded captions and
// the learnable temperature included) over all parameters.
inline double end_to_end_grad_error(std::uint64_t seed, bool class_token = false) {
  PrecisionScope f64(Precision::f64);
  ClipConfig cfg = micro_clip_config();
  cfg.image.use_class_token = class_token;
  ClipModel model = ClipModel::init(cfg, seed);
  CounterRng rng(seed, 99);
  const std::int64_t batch = 3, g = model.image.grid;
  Tensor patches = random_tensor({batch * g * g, cfg.image.patch_dim()}, rng, 1.0, false);
  std::vector<TokenMask> masks;
  for (std::int64_t b = 0; b < batch; ++b) masks.push_back(make_random_mask(g, g, 0.5, seed, static_cast<std::uint64_t>(b)));
  std::vector<TruncatedText> texts = {truncate_text({2, 3, 4}, 5, 0), truncate_text({5, 1, 6, 2, 3, 4}, 5, 0),
                                      truncate_text({4}, 5, 0)};
  std::vector<Tensor> params;
  for (auto& [_, t] : model.parameters()) params.push_back(t);
  return grad_check(
      [&] {
        const Tensor img = encode_images(model.image, patches, masks);
        const Tensor txt = encode_texts(model.text, texts);
        return infonce_loss(img, txt, exp(model.log_logit_scale));
      },
      params);
}

// --- brute-force evaluation oracles ---------------------------------------------

inline double oracle_dot(const Tensor& a, std::int64_t i, const Tensor& b, std::int64_t j) {
  double s = 0.0;
  for (std::int64_t k = 0; k < a.dim(1); ++k) s += a.at({i, k}) * b.at({j, k});
  return s;
}

// Full sort of all classes by (score desc, index asc); the first is the prediction.
inline double oracle_zero_shot(const Tensor& images, const Tensor& classes, const std::vector<std::int64_t>& labels) {
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < images.dim(0); ++i) {
    std::vector<std::pair<double, std::int64_t>> scored;
    for (std::int64_t c = 0; c < classes.dim(0); ++c) scored.emplace_back(-oracle_dot(images, i, classes, c), c);
    std::sort(scored.begin(), scored.end());
    correct += scored.front().second == labels[static_cast<std::size_t>(i)];
  }
  return images.dim(0) == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.dim(0));
}

// Full sort of candidates by (score desc, index asc); hit when the true match is in the first k.
inline double oracle_recall(const Tensor& queries, const Tensor& candidates, std::int64_t k) {
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < queries.dim(0); ++i) {
    std::vector<std::pair<double, std::int64_t>> scored;
    for (std::int64_t j = 0; j < candidates.dim(0); ++j) scored.emplace_back(-oracle_dot(queries, i, candidates, j), j);
    std::sort(scored.begin(), scored.end());
    for (std::int64_t r = 0; r < std::min<std::int64_t>(k, static_cast<std::int64_t>(scored.size())); ++r) {
      if (scored[static_cast<std::size_t>(r)].second == i) {
        ++hits;
        break;
      }
    }
  }
  return queries.dim(0) == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(queries.dim(0));
}

// Embeddings drawn from a coarse lattice so exact score ties actually occur.
inline Tensor tie_prone_rows(std::int64_t n, std::int64_t e, CounterRng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n * e));
  for (auto& x : v) x = static_cast<double>(static_cast<std::int64_t>(rng.below(3)) - 1);
  return Tensor::from({n, e}, std::move(v));
}

}  // namespace clipa::testing
