#include "podom/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "podom/checkpoint.hpp"
#include "podom/errors.hpp"

namespace podom {

using ad::Graph;
using ad::Tensor;
using ad::Var;

LossWeights LossWeights::create(ad::ParameterStore& store, LossMode mode, double init) {
  LossWeights w;
  w.mode = mode;
  if (mode == LossMode::kComp) {
    w.w_r = &store.add("loss/w_r", Tensor::scalar(init));
    w.w_t = &store.add("loss/w_t", Tensor::scalar(init));
  } else {
    for (std::size_t i = 0; i < 6; ++i) w.w[i] = &store.add("loss/w" + std::to_string(i), Tensor::scalar(init));
  }
  return w;
}

std::pair<double, double> LossWeights::summary() const {
  if (mode == LossMode::kComp) return {w_r->value.item(), w_t->value.item()};
  double r = 0, t = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    r += w[i]->value.item() / 3.0;
    t += w[i + 3]->value.item() / 3.0;
  }
  return {r, t};
}

namespace {

void require_finite(const Var& v, const char* what) {
  if (!v.value().all_finite()) throw InvalidStatsError(std::string("weighted_loss: non-finite ") + what);
}

// Per-sample exp(-w) * norm + w for a B x 1 column and a 1 x 1 weight.
Var weighted_term(Var norms, Var w) {
  Graph& g = *norms.graph;
  const Var ones = g.constant(Tensor({norms.rows(), 1}, 1.0));
  return ad::add(ad::matmul(norms, ad::exp(ad::neg(w))), ad::matmul(ones, w));
}

// Sum over three components of exp(-w_i) |d_i| + w_i, per row.
Var indiv_term(Var diff, const std::array<ad::Parameter*, 6>& w, std::size_t first) {
  Graph& g = *diff.graph;
  const Var wv = ad::reshape(ad::concat_cols({g.param(*w[first]), g.param(*w[first + 1]), g.param(*w[first + 2])}), {3, 1});
  const Var ones = g.constant(Tensor({diff.rows(), 1}, 1.0));
  return ad::add(ad::matmul(ad::abs(diff), ad::exp(ad::neg(wv))), ad::matmul(ones, ad::sum(wv)));
}

}  // namespace

LossTerms weighted_loss(Var pred_rot, Var pred_trans, Var gt_rot, Var gt_trans, const LossWeights& w) {
  require_finite(pred_rot, "rotation prediction");
  require_finite(pred_trans, "translation prediction");
  require_finite(gt_rot, "rotation label");
  require_finite(gt_trans, "translation label");
  if (pred_rot.cols() != 3 || pred_trans.cols() != 3 || gt_rot.cols() != 3 || gt_trans.cols() != 3 ||
      pred_rot.rows() != gt_rot.rows() || pred_trans.rows() != gt_trans.rows() ||
      pred_rot.rows() != pred_trans.rows()) {
    throw ShapeError("weighted_loss: expected matching B x 3 predictions and labels");
  }
  Graph& g = *pred_rot.graph;
  const Var dr = ad::sub(pred_rot, gt_rot);
  const Var dt = ad::sub(pred_trans, gt_trans);
  LossTerms out;
  if (w.mode == LossMode::kComp) {
    out.rot = weighted_term(ad::row_norm(dr), g.param(*w.w_r));
    out.trans = weighted_term(ad::row_norm(dt), g.param(*w.w_t));
  } else {
    out.rot = indiv_term(dr, w.w, 0);
    out.trans = indiv_term(dt, w.w, 3);
  }
  out.per_sample = ad::add(out.rot, out.trans);
  return out;
}

double weighted_loss_value(const std::array<double, 6>& pred, const std::array<double, 6>& gt, double w_r,
                           double w_t) {
  double nr = 0, nt = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    nr += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    nt += (pred[i + 3] - gt[i + 3]) * (pred[i + 3] - gt[i + 3]);
  }
  return std::exp(-w_r) * std::sqrt(nr) + w_r + std::exp(-w_t) * std::sqrt(nt) + w_t;
}

Var ohem_select(Var per_sample, int k) {
  if (!per_sample.valid() || per_sample.value().empty()) throw ShapeError("ohem_select: empty batch");
  const int n = static_cast<int>(per_sample.value().size());
  if (k < 1 || k > n) {
    throw ConfigError("ohem_select: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  return ad::topk_mean(per_sample, k);
}

double OhemSchedule::fraction(int epoch) const {
  double f = phases.front().second;
  for (const auto& [start, frac] : phases) {
    if (epoch >= start) f = frac;
  }
  return f;
}

int OhemSchedule::k(int epoch, int batch) const {
  if (batch < 1) throw ConfigError("ohem schedule: batch must be positive");
  const int k = static_cast<int>(std::ceil(fraction(epoch) * batch - 1e-12));
  return std::clamp(k, 1, batch);
}

void OhemSchedule::validate() const {
  if (phases.empty()) throw ConfigError("ohem schedule: no phases");
  if (phases.front().first != 0) throw ConfigError("ohem schedule: first phase must start at epoch 0");
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const double f = phases[i].second;
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("ohem schedule: fractions must lie in (0, 1]");
    if (i > 0 && phases[i].first <= phases[i - 1].first) {
      throw ConfigError("ohem schedule: epoch thresholds must increase");
    }
    if (i > 0 && f < phases[i - 1].second) throw ConfigError("ohem schedule: fractions must not decrease");
  }
  if (phases.back().second != 1.0) throw ConfigError("ohem schedule: final fraction must be 1");
}

void TrainConfig::validate() const {
  if (stages < 1) throw ConfigError("train: stages must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr > 0.0 && std::isfinite(lr))) throw ConfigError("train: lr must be positive");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  ohem.validate();
}

namespace {

std::string mode_name(LossMode m) { return m == LossMode::kComp ? "comp" : "indiv"; }

LossMode mode_from_name(const std::string& s) {
  if (s == "comp") return LossMode::kComp;
  if (s == "indiv") return LossMode::kIndiv;
  throw ConfigError("unknown loss mode '" + s + "' (expected comp or indiv)");
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stages", c.stages},         {"epochs", c.epochs},
                     {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"loss", mode_name(c.loss)},  {"ohem", c.ohem.phases},
                     {"dropout", c.dropout},       {"learn_loss_weights", c.learn_loss_weights},
                     {"max_steps", c.max_steps},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.stages = j.value("stages", c.stages);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.loss = mode_from_name(j.value("loss", mode_name(c.loss)));
  if (j.contains("ohem")) c.ohem.phases = j.at("ohem").get<std::vector<std::pair<int, double>>>();
  c.dropout = j.value("dropout", c.dropout);
  c.learn_loss_weights = j.value("learn_loss_weights", c.learn_loss_weights);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,total,rot,trans,w_r,w_t\n";
  for (const auto& r : curve) {
    out << fmt::format("{},{},{},{},{},{}\n", r.step, r.total, r.rot, r.trans, r.w_r, r.w_t);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Pose StageModel::predict(const FramePair& pair) const { return euler_to_pose(predict_euler(pair)); }

EulerPose StageModel::predict_euler(const FramePair& pair) const {
  return normalizer.denormalize(net->predict(pair));
}

StageModel make_stage_model(const RegNetConfig& cfg, const LabelNormalizer& normalizer, LossMode mode,
                            int stage_index) {
  normalizer.validate();
  StageModel m;
  m.net = std::make_unique<RegNet>(cfg);
  m.normalizer = normalizer;
  m.loss_weights = LossWeights::create(m.loss_params, mode);
  m.stage_index = stage_index;
  return m;
}

namespace {

constexpr const char* kStageFormat = "podom-stage";
constexpr const char* kLossPrefix = "loss/";

bool is_loss_tensor(const std::string& name) { return name.rfind(kLossPrefix, 0) == 0; }

}  // namespace

void save_stage(const std::filesystem::path& path, const StageModel& model) {
  nlohmann::json header{{"format", kStageFormat},
                        {"regnet", model.net->config()},
                        {"normalizer", {{"mean", model.normalizer.mean}, {"scale", model.normalizer.scale}}},
                        {"loss", mode_name(model.loss_weights.mode)},
                        {"stage", model.stage_index}};
  TensorFile file = to_tensor_file(model.net->params(), header.dump());
  for (const ad::Parameter* p : model.loss_params.all()) {
    file.tensors.emplace_back(p->name, p->value);
    file.trainable.push_back(p->trainable);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_tensor_file(path, file);
}

StageModel load_stage(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  if (header.value("format", "") != kStageFormat) throw IoError(path.string() + ": not a stage checkpoint");
  LabelNormalizer norm;
  norm.mean = header.at("normalizer").at("mean").get<std::array<double, 6>>();
  norm.scale = header.at("normalizer").at("scale").get<std::array<double, 6>>();
  StageModel m = make_stage_model(header.at("regnet").get<RegNetConfig>(), norm,
                                  mode_from_name(header.at("loss").get<std::string>()),
                                  header.at("stage").get<int>());
  TensorFile net_part, loss_part;
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    TensorFile& dst = is_loss_tensor(file.tensors[i].first) ? loss_part : net_part;
    dst.tensors.push_back(file.tensors[i]);
    dst.trainable.push_back(file.trainable[i]);
  }
  load_into(m.net->params(), net_part);
  load_into(m.loss_params, loss_part);
  return m;
}

namespace {

struct BatchLoss {
  Var total;
  LossTerms terms;
};

BatchLoss batch_loss(Graph& g, StageModel& model, std::span<const FramePair* const> batch,
                     const ForwardOptions& fo, int k) {
  const auto out = model.net->forward(g, batch, fo);
  const int n = static_cast<int>(batch.size());
  Tensor gr({n, 3}), gt({n, 3});
  for (int b = 0; b < n; ++b) {
    const auto v = model.normalizer.normalize(batch[static_cast<std::size_t>(b)]->label);
    for (int c = 0; c < 3; ++c) {
      gr.at(b, c) = v[static_cast<std::size_t>(c)];
      gt.at(b, c) = v[static_cast<std::size_t>(c) + 3];
    }
  }
  BatchLoss r;
  r.terms = weighted_loss(out.rot, out.trans, g.constant(std::move(gr)), g.constant(std::move(gt)), model.loss_weights);
  r.total = ohem_select(r.terms.per_sample, k);
  return r;
}

double column_mean(const Var& v) {
  const auto vals = v.value().values();
  return std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
}

}  // namespace

TrainResult train_stage(StageModel& model, std::span<const FramePair> pairs, const TrainConfig& cfg,
                        const StepCallback& on_step) {
  cfg.validate();
  if (pairs.empty()) throw TrainingError("train_stage: empty dataset");

  std::vector<int> pool;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (int r = 0; r < pairs[i].weight; ++r) pool.push_back(static_cast<int>(i));
  }
  if (pool.empty()) throw TrainingError("train_stage: every pair has weight 0");

  std::vector<ad::Parameter*> params = model.net->params().trainable();
  if (cfg.learn_loss_weights) {
    for (ad::Parameter* p : model.loss_params.trainable()) params.push_back(p);
  }
  std::vector<ad::Parameter*> buffers;
  for (ad::Parameter* p : model.net->params().all()) {
    if (!p->trainable) buffers.push_back(p);
  }

  ad::Adam adam(ad::AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  ForwardOptions fo;
  fo.mode = ad::Mode::kTrain;
  fo.dropout = cfg.dropout;
  fo.rng = &rng;

  TrainResult result;
  std::vector<Tensor> saved(buffers.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t start = 0; start < pool.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(pool.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const FramePair*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&pairs[static_cast<std::size_t>(pool[i])]);
      for (std::size_t i = 0; i < buffers.size(); ++i) saved[i] = buffers[i]->value;

      Graph g;
      const int k = cfg.ohem.k(epoch, static_cast<int>(batch.size()));
      BatchLoss loss;
      bool finite = true;
      try {
        loss = batch_loss(g, model, batch, fo, k);
        finite = std::isfinite(loss.total.value().item());
      } catch (const InvalidStatsError&) {
        finite = false;
      }
      if (finite) {
        model.net->params().zero_grad();
        model.loss_params.zero_grad();
        g.backward(loss.total);
        const auto report = adam.step(params);
        finite = report.applied;
      }
      if (!finite) {
        for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i]->value = saved[i];
        spdlog::error("training diverged at step {} (epoch {}); keeping the last finite parameters",
                      result.steps + 1, epoch);
        result.diverged = true;
        return result;
      }

      ++result.steps;
      const auto [wr, wt] = model.loss_weights.summary();
      const LossRecord rec{result.steps, loss.total.value().item(), column_mean(loss.terms.rot),
                           column_mean(loss.terms.trans), wr, wt};
      result.curve.push_back(rec);
      if (on_step && !on_step(rec)) return result;
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) return result;
    }
  }
  return result;
}

double probe_loss(StageModel& model, std::span<const FramePair> pairs, int batch_size) {
  if (pairs.empty()) throw TrainingError("probe_loss: empty dataset");
  if (batch_size < 1) throw ConfigError("probe_loss: batch_size must be positive");
  ForwardOptions fo;
  fo.mode = ad::Mode::kTrain;
  fo.dropout = false;
  fo.update_bn_stats = false;
  double total = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(pairs.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const FramePair*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&pairs[i]);
    Graph g;
    const auto loss = batch_loss(g, model, batch, fo, static_cast<int>(batch.size()));
    total += loss.total.value().item() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(pairs.size());
}

Pose residual_label(const Pose& t_gt, const Pose& t_pred) { return compose(t_gt, inverse(t_pred)); }

ResidualDataset build_residual_dataset(std::span<const FramePair> pairs, std::span<const Pose> predictions) {
  if (pairs.size() != predictions.size()) {
    throw ShapeError("build_residual_dataset: " + std::to_string(pairs.size()) + " pairs but " +
                     std::to_string(predictions.size()) + " predictions");
  }
  ResidualDataset out;
  out.pairs.reserve(pairs.size());
  std::vector<EulerPose> labels;
  labels.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    FramePair p;
    p.source = transform_cloud(pairs[i].source, predictions[i]);
    p.target = pairs[i].target;
    p.label = pose_to_euler(residual_label(euler_to_pose(pairs[i].label), predictions[i]));
    p.weight = pairs[i].weight;
    labels.push_back(p.label);
    out.pairs.push_back(std::move(p));
  }
  out.normalizer = LabelNormalizer::fit(labels);
  return out;
}

ResidualDataset build_residual_dataset(std::span<const FramePair> pairs, const StageModel& model) {
  std::vector<Pose> preds;
  preds.reserve(pairs.size());
  for (const auto& p : pairs) preds.push_back(model.predict(p));
  return build_residual_dataset(pairs, preds);
}

Pose hierarchical_infer(const FramePair& pair, std::span<const std::function<Pose(const FramePair&)>> stages) {
  if (stages.empty()) throw ConfigError("hierarchical_infer: need at least one stage");
  Pose total;
  FramePair current;
  const FramePair* input = &pair;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const Pose t = stages[s](*input);
    total = compose(t, total);
    if (s + 1 < stages.size()) {
      current.source = transform_cloud(input->source, t);
      if (input == &pair) current.target = pair.target;
      current.label = pair.label;
      input = &current;
    }
  }
  return total;
}

Pose hierarchical_infer(const FramePair& pair, std::span<const StageModel* const> stages) {
  std::vector<std::function<Pose(const FramePair&)>> fns;
  fns.reserve(stages.size());
  for (const StageModel* s : stages) fns.emplace_back([s](const FramePair& p) { return s->predict(p); });
  return hierarchical_infer(pair, fns);
}

}  // namespace podom
