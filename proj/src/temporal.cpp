#include "podom/temporal.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "podom/checkpoint.hpp"
#include "podom/errors.hpp"

namespace podom {

using ad::Graph;
using ad::Tensor;
using ad::Var;

std::string tap_name(TapKind t) {
  switch (t) {
    case TapKind::kPref: return "pref";
    case TapKind::kPosf: return "posf";
    case TapKind::kFclf: return "fclf";
  }
  return "fclf";
}

TapKind tap_from_name(const std::string& s) {
  if (s == "pref" || s == "PREF") return TapKind::kPref;
  if (s == "posf" || s == "POSF") return TapKind::kPosf;
  if (s == "fclf" || s == "FCLF") return TapKind::kFclf;
  throw ConfigError("unknown tap '" + s + "' (expected pref, posf or fclf)");
}

void TemporalConfig::validate() const {
  if (window < 2) throw ConfigError("temporal: window must be >= 2");
  if (fc.empty()) throw ConfigError("temporal: need at least one fc layer");
  for (int w : fc) {
    if (w < 1) throw ConfigError("temporal: fc widths must be positive");
  }
  if (hidden < 1 || recurrent_layers < 1 || post_fc < 1) throw ConfigError("temporal: widths must be positive");
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("temporal: keep_prob must lie in (0, 1]");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("temporal: bn_momentum must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TemporalConfig& c) {
  j = nlohmann::json{{"tap", tap_name(c.tap)},
                     {"window", c.window},
                     {"fc", c.fc},
                     {"hidden", c.hidden},
                     {"recurrent_layers", c.recurrent_layers},
                     {"post_fc", c.post_fc},
                     {"cell", c.cell == CellActivation::kSoftsign ? "softsign" : "tanh"},
                     {"batch_norm", c.batch_norm},
                     {"bn_momentum", c.bn_momentum},
                     {"keep_prob", c.keep_prob},
                     {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, TemporalConfig& c) {
  const TemporalConfig d;
  c.tap = tap_from_name(j.value("tap", tap_name(d.tap)));
  c.window = j.value("window", d.window);
  c.fc = j.value("fc", d.fc);
  c.hidden = j.value("hidden", d.hidden);
  c.recurrent_layers = j.value("recurrent_layers", d.recurrent_layers);
  c.post_fc = j.value("post_fc", d.post_fc);
  const std::string cell = j.value("cell", std::string("softsign"));
  if (cell == "softsign") {
    c.cell = CellActivation::kSoftsign;
  } else if (cell == "tanh") {
    c.cell = CellActivation::kTanh;
  } else {
    throw ConfigError("unknown cell activation '" + cell + "'");
  }
  c.batch_norm = j.value("batch_norm", d.batch_norm);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  c.keep_prob = j.value("keep_prob", d.keep_prob);
  c.init_seed = j.value("init_seed", d.init_seed);
}

std::vector<TapSample> extract_features(std::span<const FramePair> pairs, RegNet& net, TapKind tap) {
  std::vector<TapSample> out;
  out.reserve(pairs.size());
  for (const auto& pair : pairs) {
    TapFeatures t = net.taps(pair);
    TapSample s;
    switch (tap) {
      case TapKind::kFclf:
        s.maps.push_back(std::move(t.fclf));
        break;
      case TapKind::kPosf:
        s.maps.push_back(std::move(t.posf));
        s.positions.push_back(std::move(t.posf_positions));
        break;
      case TapKind::kPref:
        for (std::size_t f = 0; f < 2; ++f) {
          s.maps.push_back(std::move(t.pref[f]));
          s.positions.push_back(std::move(t.pref_positions[f]));
        }
        break;
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

constexpr const char* kFeatureFormat = "podom-features";
constexpr const char* kTemporalFormat = "podom-temporal";

std::size_t maps_per_sample(TapKind t) { return t == TapKind::kPref ? 2 : 1; }
std::size_t positions_per_sample(TapKind t) {
  return t == TapKind::kPref ? 2 : (t == TapKind::kPosf ? 1 : 0);
}

}  // namespace

void write_feature_cache(const std::filesystem::path& path, std::span<const TapSample> samples, TapKind tap) {
  TensorFile file;
  file.header = nlohmann::json{{"format", kFeatureFormat}, {"tap", tap_name(tap)}, {"count", samples.size()}}.dump();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const TapSample& s = samples[i];
    if (s.maps.size() != maps_per_sample(tap) || s.positions.size() != positions_per_sample(tap)) {
      throw ShapeError("write_feature_cache: sample " + std::to_string(i) + " does not match tap " + tap_name(tap));
    }
    const std::string prefix = "s" + std::to_string(i) + "/";
    for (std::size_t m = 0; m < s.maps.size(); ++m) {
      file.tensors.emplace_back(prefix + "map" + std::to_string(m), s.maps[m]);
      file.trainable.push_back(false);
    }
    for (std::size_t p = 0; p < s.positions.size(); ++p) {
      file.tensors.emplace_back(prefix + "pos" + std::to_string(p), Tensor::from_matrix(s.positions[p]));
      file.trainable.push_back(false);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_tensor_file(path, file);
}

std::vector<TapSample> read_feature_cache(const std::filesystem::path& path, TapKind* tap_out) {
  const TensorFile file = read_tensor_file(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed feature cache header: " + e.what());
  }
  if (header.value("format", "") != kFeatureFormat) throw IoError(path.string() + ": not a feature cache");
  const TapKind tap = tap_from_name(header.at("tap").get<std::string>());
  const auto count = header.at("count").get<std::size_t>();
  const std::size_t per = maps_per_sample(tap) + positions_per_sample(tap);
  if (file.tensors.size() != count * per) throw IoError(path.string() + ": feature cache tensor count mismatch");
  std::vector<TapSample> out(count);
  std::size_t k = 0;
  for (auto& s : out) {
    for (std::size_t m = 0; m < maps_per_sample(tap); ++m) s.maps.push_back(file.tensors[k++].second);
    for (std::size_t p = 0; p < positions_per_sample(tap); ++p) {
      const Tensor& t = file.tensors[k++].second;
      if (t.cols() != 3) throw IoError(path.string() + ": positions must have 3 columns");
      s.positions.emplace_back(t.mat());
    }
  }
  if (tap_out != nullptr) *tap_out = tap;
  return out;
}

int center_window_start(int i, int n, int window) {
  if (window < 1) throw ConfigError("window must be positive");
  if (n < window) {
    throw ShapeError("sequence of " + std::to_string(n) + " pairs is shorter than the window of " +
                     std::to_string(window));
  }
  if (i < 0 || i >= n) throw ShapeError("pair index out of range");
  return std::clamp(i - window / 2, 0, n - window);
}

std::vector<int> window_starts(int n, int window) {
  if (n < window) {
    throw ShapeError("sequence of " + std::to_string(n) + " pairs is shorter than the window of " +
                     std::to_string(window));
  }
  std::vector<int> s(static_cast<std::size_t>(n - window + 1));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<int>(i);
  return s;
}

namespace {

std::vector<int> halved(const std::vector<int>& widths) {
  std::vector<int> out;
  for (int w : widths) out.push_back(std::max(1, w / 2));
  return out;
}

Tensor stack_rows(std::span<const Tensor* const> parts) {
  int rows = 0;
  const int cols = parts.front()->cols();
  for (const Tensor* t : parts) {
    if (t->cols() != cols) throw ShapeError("temporal: feature widths differ between frames");
    rows += t->rows();
  }
  Tensor out({rows, cols});
  int r = 0;
  for (const Tensor* t : parts) {
    out.mat().middleRows(r, t->rows()) = t->mat();
    r += t->rows();
  }
  return out;
}

}  // namespace

TemporalModel::TemporalModel(TemporalConfig cfg, RegNetConfig source) : cfg_(std::move(cfg)), source_(std::move(source)) {
  cfg_.validate();
  source_.validate();
  std::mt19937_64 rng(cfg_.init_seed);
  const bool bn = cfg_.batch_norm;
  const double m = cfg_.bn_momentum;

  switch (cfg_.tap) {
    case TapKind::kFclf:
      input_width_ = source_.flat_size();
      break;
    case TapKind::kPosf: {
      SetAbstractionSpec sa = source_.final_sa;
      sa.mlp = halved(sa.mlp);
      front_sa_ = make_set_abstraction(store_, "front/sa0", sa, source_.embedding.mlp.back(), bn, m, rng);
      input_width_ = sa.n_out * sa.mlp.back();
      break;
    }
    case TapKind::kPref: {
      FlowEmbeddingSpec emb = source_.embedding;
      emb.mlp = halved(emb.mlp);
      front_embedding_ = make_flow_embedding(store_, "front/embedding", emb, source_.embedding_channels(), bn, m, rng);
      SetAbstractionSpec sa = source_.final_sa;
      sa.mlp = halved(sa.mlp);
      front_sa_ = make_set_abstraction(store_, "front/sa0", sa, emb.mlp.back(), bn, m, rng);
      input_width_ = sa.n_out * sa.mlp.back();
      break;
    }
  }

  int in = input_width_;
  for (std::size_t i = 0; i < cfg_.fc.size(); ++i) {
    fc_.push_back(make_dense(store_, "fc/l" + std::to_string(i), in, cfg_.fc[i], bn, m, rng));
    in = cfg_.fc[i];
  }
  const int h = cfg_.hidden;
  for (int l = 0; l < cfg_.recurrent_layers; ++l) {
    std::array<Recurrent, 2> dirs;
    for (std::size_t d = 0; d < 2; ++d) {
      const std::string name = "lstm/l" + std::to_string(l) + (d == 0 ? "/fwd" : "/bwd");
      dirs[d].wx = &store_.add(name + "/wx", ad::glorot_uniform(in, 4 * h, rng));
      dirs[d].wh = &store_.add(name + "/wh", ad::glorot_uniform(h, 4 * h, rng));
      Tensor b({1, 4 * h}, 0.0);
      for (int k = h; k < 2 * h; ++k) b[static_cast<std::size_t>(k)] = 1.0;  // forget gate starts open
      dirs[d].b = &store_.add(name + "/b", std::move(b));
    }
    recurrent_.push_back(dirs);
    in = 2 * h;
  }
  post_ = make_dense(store_, "post/l0", in, cfg_.post_fc, bn, m, rng);
  rot_head_ = make_dense(store_, "head/rot", cfg_.post_fc, 3, false, m, rng);
  trans_head_ = make_dense(store_, "head/trans", cfg_.post_fc, 3, false, m, rng);
}

Var TemporalModel::front(Graph& g, std::span<const TapSample* const> frames, const LayerOptions& lo) {
  const std::size_t n_maps = maps_per_sample(cfg_.tap), n_pos = positions_per_sample(cfg_.tap);
  for (const TapSample* s : frames) {
    if (s->maps.size() != n_maps || s->positions.size() != n_pos) {
      throw ShapeError("temporal: sample does not match tap " + tap_name(cfg_.tap));
    }
  }
  auto stacked = [&](std::size_t m) {
    std::vector<const Tensor*> parts;
    for (const TapSample* s : frames) parts.push_back(&s->maps[m]);
    return g.constant(stack_rows(parts));
  };
  auto batch = [&](std::size_t m) {
    CloudBatch b;
    for (const TapSample* s : frames) {
      if (s->positions[m].rows() != s->maps[m].rows()) throw ShapeError("temporal: positions do not match map rows");
      b.positions.push_back(s->positions[m]);
    }
    b.feats = stacked(m);
    return b;
  };
  const int n = static_cast<int>(frames.size());
  if (cfg_.tap == TapKind::kFclf) {
    Var x = stacked(0);
    if (x.cols() != input_width_ || x.rows() != n) {
      throw ShapeError("temporal: expected 1 x " + std::to_string(input_width_) + " features per frame");
    }
    return x;
  }
  CloudBatch maps = batch(0);
  if (cfg_.tap == TapKind::kPref) maps = flow_embedding(*front_embedding_, maps, batch(1), lo);
  const CloudBatch out = set_abstraction(*front_sa_, maps, lo);
  return ad::reshape(out.feats, {n, input_width_});
}

Var TemporalModel::run_direction(Graph& g, const Recurrent& cell, Var x, int batch, bool reverse) {
  const int t_len = cfg_.window, h = cfg_.hidden;
  auto act = [&](Var v) { return cfg_.cell == CellActivation::kSoftsign ? ad::softsign(v) : ad::tanh(v); };
  const Var wx = g.param(*cell.wx), wh = g.param(*cell.wh), b = g.param(*cell.b);
  // input projections for all frames at once, rows window-major
  const Var proj = ad::add_bias(ad::matmul(x, wx), b);
  Var hs = g.constant(Tensor({batch, h}, 0.0));
  Var cs = g.constant(Tensor({batch, h}, 0.0));
  std::vector<Var> outs(static_cast<std::size_t>(t_len));
  for (int s = 0; s < t_len; ++s) {
    const int t = reverse ? t_len - 1 - s : s;
    std::vector<int> rows;
    for (int w = 0; w < batch; ++w) rows.push_back(w * t_len + t);
    const Var gates = ad::add(ad::gather_rows(proj, std::move(rows)), ad::matmul(hs, wh));
    const Var i = ad::sigmoid(ad::slice_cols(gates, 0, h));
    const Var f = ad::sigmoid(ad::slice_cols(gates, h, 2 * h));
    const Var c_in = act(ad::slice_cols(gates, 2 * h, 3 * h));
    const Var o = ad::sigmoid(ad::slice_cols(gates, 3 * h, 4 * h));
    cs = ad::add(ad::mul(f, cs), ad::mul(i, c_in));
    hs = ad::mul(o, act(cs));
    outs[static_cast<std::size_t>(t)] = hs;
  }
  // time-major stack back to window-major rows
  std::vector<int> order;
  for (int w = 0; w < batch; ++w) {
    for (int t = 0; t < t_len; ++t) order.push_back(t * batch + w);
  }
  return ad::gather_rows(ad::concat_rows(outs), std::move(order));
}

Var TemporalModel::post_layer(const DenseLayer& layer, Var x, ad::Mode mode, bool update_bn, std::mt19937_64* rng) {
  Var y = dense_forward(layer, x, LayerOptions{mode, update_bn, nullptr});
  if (mode == ad::Mode::kTrain && cfg_.keep_prob < 1.0) {
    if (rng == nullptr) throw ConfigError("temporal forward: training-mode dropout needs an rng");
    y = ad::dropout(y, cfg_.keep_prob, mode, *rng);
  }
  return y;
}

TemporalOutput TemporalModel::forward(Graph& g, std::span<const std::vector<const TapSample*>> windows, ad::Mode mode,
                                      std::mt19937_64* rng, bool update_bn_stats) {
  if (windows.empty()) throw ShapeError("temporal forward: empty batch");
  std::vector<const TapSample*> frames;
  for (const auto& w : windows) {
    if (static_cast<int>(w.size()) != cfg_.window) {
      throw ShapeError("temporal forward: window of " + std::to_string(w.size()) + " frames, expected " +
                       std::to_string(cfg_.window));
    }
    frames.insert(frames.end(), w.begin(), w.end());
  }
  const int batch = static_cast<int>(windows.size());
  const LayerOptions lo{mode, update_bn_stats, &cache_};

  Var x = front(g, frames, lo);
  for (const auto& layer : fc_) x = post_layer(layer, x, mode, update_bn_stats, rng);
  for (const auto& dirs : recurrent_) {
    x = ad::concat_cols({run_direction(g, dirs[0], x, batch, false), run_direction(g, dirs[1], x, batch, true)});
    if (mode == ad::Mode::kTrain && cfg_.keep_prob < 1.0) {
      if (rng == nullptr) throw ConfigError("temporal forward: training-mode dropout needs an rng");
      x = ad::dropout(x, cfg_.keep_prob, mode, *rng);
    }
  }
  x = post_layer(post_, x, mode, update_bn_stats, rng);
  TemporalOutput out;
  out.rot = ad::linear(x, g.param(*rot_head_.weight), g.param(*rot_head_.bias));
  out.trans = ad::linear(x, g.param(*trans_head_.weight), g.param(*trans_head_.bias));
  return out;
}

void TemporalTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("temporal train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("temporal train: batch_size must be >= 1");
  if (!(lr > 0.0 && std::isfinite(lr))) throw ConfigError("temporal train: lr must be positive");
  if (max_steps < 0) throw ConfigError("temporal train: max_steps must be >= 0");
}

void to_json(nlohmann::json& j, const TemporalTrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"loss", c.loss == LossMode::kComp ? "comp" : "indiv"},
                     {"learn_loss_weights", c.learn_loss_weights},
                     {"max_steps", c.max_steps},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TemporalTrainConfig& c) {
  const TemporalTrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  const std::string loss = j.value("loss", std::string("comp"));
  if (loss == "comp") {
    c.loss = LossMode::kComp;
  } else if (loss == "indiv") {
    c.loss = LossMode::kIndiv;
  } else {
    throw ConfigError("unknown loss mode '" + loss + "'");
  }
  c.learn_loss_weights = j.value("learn_loss_weights", d.learn_loss_weights);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.seed = j.value("seed", d.seed);
}

TemporalBundle make_temporal_bundle(const TemporalConfig& cfg, const RegNetConfig& source,
                                    const LabelNormalizer& normalizer, LossMode mode) {
  normalizer.validate();
  TemporalBundle b;
  b.model = std::make_unique<TemporalModel>(cfg, source);
  b.normalizer = normalizer;
  b.loss_weights = LossWeights::create(b.loss_params, mode);
  return b;
}

namespace {

struct WindowRef {
  std::size_t seq;
  int start;
};

}  // namespace

TrainResult train_temporal(TemporalBundle& bundle, std::span<const FeatureSequence> sequences,
                           const TemporalTrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  const int win = bundle.model->config().window;
  std::vector<WindowRef> pool;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seq = sequences[s];
    if (seq.samples.size() != seq.labels.size()) throw ShapeError("train_temporal: samples and labels differ in length");
    for (int start : window_starts(static_cast<int>(seq.samples.size()), win)) pool.push_back({s, start});
  }
  if (pool.empty()) throw TrainingError("train_temporal: no sequences");

  std::vector<ad::Parameter*> params = bundle.model->params().trainable();
  if (cfg.learn_loss_weights) {
    for (ad::Parameter* p : bundle.loss_params.trainable()) params.push_back(p);
  }
  std::vector<ad::Parameter*> buffers;
  for (ad::Parameter* p : bundle.model->params().all()) {
    if (!p->trainable) buffers.push_back(p);
  }
  std::vector<Tensor> saved(buffers.size());

  ad::Adam adam(ad::AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t b0 = 0; b0 < pool.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(pool.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<const TapSample*>> windows;
      const int rows = static_cast<int>(b1 - b0) * win;
      Tensor gr({rows, 3}), gt({rows, 3});
      int r = 0;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& seq = sequences[pool[k].seq];
        std::vector<const TapSample*> w;
        for (int t = 0; t < win; ++t) {
          const auto idx = static_cast<std::size_t>(pool[k].start + t);
          w.push_back(&seq.samples[idx]);
          const auto v = bundle.normalizer.normalize(seq.labels[idx]);
          for (int c = 0; c < 3; ++c) {
            gr.at(r, c) = v[static_cast<std::size_t>(c)];
            gt.at(r, c) = v[static_cast<std::size_t>(c) + 3];
          }
          ++r;
        }
        windows.push_back(std::move(w));
      }
      for (std::size_t i = 0; i < buffers.size(); ++i) saved[i] = buffers[i]->value;

      Graph g;
      const auto out = bundle.model->forward(g, windows, ad::Mode::kTrain, &rng);
      bool finite = true;
      LossTerms terms;
      Var total;
      try {
        terms = weighted_loss(out.rot, out.trans, g.constant(std::move(gr)), g.constant(std::move(gt)),
                              bundle.loss_weights);
        total = ad::mean(terms.per_sample);
        finite = std::isfinite(total.value().item());
      } catch (const InvalidStatsError&) {
        finite = false;
      }
      if (finite) {
        bundle.model->params().zero_grad();
        bundle.loss_params.zero_grad();
        g.backward(total);
        finite = adam.step(params).applied;
      }
      if (!finite) {
        for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i]->value = saved[i];
        spdlog::error("temporal training diverged at step {}; keeping the last finite parameters", result.steps + 1);
        result.diverged = true;
        return result;
      }
      ++result.steps;
      const auto [wr, wt] = bundle.loss_weights.summary();
      auto mean_of = [](const Var& v) {
        double s = 0.0;
        for (double x : v.value().values()) s += x;
        return s / static_cast<double>(v.value().size());
      };
      const LossRecord rec{result.steps, total.value().item(), mean_of(terms.rot), mean_of(terms.trans), wr, wt};
      result.curve.push_back(rec);
      if (on_step && !on_step(rec)) return result;
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) return result;
    }
  }
  return result;
}

std::vector<EulerPose> infer_sequence(TemporalBundle& bundle, std::span<const TapSample> samples) {
  const int win = bundle.model->config().window;
  const int n = static_cast<int>(samples.size());
  const std::vector<int> starts = window_starts(n, win);
  // every window is evaluated once; pairs pick their centered window
  std::vector<std::array<double, 6>> outputs(starts.size() * static_cast<std::size_t>(win));
  constexpr std::size_t kChunk = 64;
  for (std::size_t c0 = 0; c0 < starts.size(); c0 += kChunk) {
    const std::size_t c1 = std::min(starts.size(), c0 + kChunk);
    std::vector<std::vector<const TapSample*>> windows;
    for (std::size_t k = c0; k < c1; ++k) {
      std::vector<const TapSample*> w;
      for (int t = 0; t < win; ++t) w.push_back(&samples[static_cast<std::size_t>(starts[k] + t)]);
      windows.push_back(std::move(w));
    }
    Graph g;
    const auto out = bundle.model->forward(g, windows, ad::Mode::kInfer);
    for (int row = 0; row < out.rot.rows(); ++row) {
      auto& o = outputs[c0 * static_cast<std::size_t>(win) + static_cast<std::size_t>(row)];
      for (int c = 0; c < 3; ++c) {
        o[static_cast<std::size_t>(c)] = out.rot.value().at(row, c);
        o[static_cast<std::size_t>(c) + 3] = out.trans.value().at(row, c);
      }
    }
  }
  std::vector<EulerPose> poses;
  poses.reserve(samples.size());
  for (int i = 0; i < n; ++i) {
    const int start = center_window_start(i, n, win);
    poses.push_back(bundle.normalizer.denormalize(outputs[static_cast<std::size_t>(start * win + (i - start))]));
  }
  return poses;
}

void save_temporal(const std::filesystem::path& path, const TemporalBundle& bundle) {
  const nlohmann::json header{
      {"format", kTemporalFormat},
      {"temporal", bundle.model->config()},
      {"regnet", bundle.model->source_config()},
      {"normalizer", {{"mean", bundle.normalizer.mean}, {"scale", bundle.normalizer.scale}}},
      {"loss", bundle.loss_weights.mode == LossMode::kComp ? "comp" : "indiv"}};
  TensorFile file = to_tensor_file(bundle.model->params(), header.dump());
  for (const ad::Parameter* p : bundle.loss_params.all()) {
    file.tensors.emplace_back(p->name, p->value);
    file.trainable.push_back(p->trainable);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_tensor_file(path, file);
}

TemporalBundle load_temporal(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (header.value("format", "") != kTemporalFormat) throw IoError(path.string() + ": not a temporal checkpoint");
  LabelNormalizer norm;
  norm.mean = header.at("normalizer").at("mean").get<std::array<double, 6>>();
  norm.scale = header.at("normalizer").at("scale").get<std::array<double, 6>>();
  const LossMode mode = header.at("loss").get<std::string>() == "indiv" ? LossMode::kIndiv : LossMode::kComp;
  TemporalBundle b = make_temporal_bundle(header.at("temporal").get<TemporalConfig>(),
                                          header.at("regnet").get<RegNetConfig>(), norm, mode);
  TensorFile net_part, loss_part;
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    TensorFile& dst = file.tensors[i].first.rfind("loss/", 0) == 0 ? loss_part : net_part;
    dst.tensors.push_back(file.tensors[i]);
    dst.trainable.push_back(file.trainable[i]);
  }
  load_into(b.model->params(), net_part);
  load_into(b.loss_params, loss_part);
  return b;
}

}  // namespace podom
