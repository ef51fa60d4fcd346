#include "podom/regnet.hpp"

#include <algorithm>
#include <numeric>

#include "podom/sampling.hpp"
#include "podom/spatial_grid.hpp"

namespace podom {

using ad::Graph;
using ad::Parameter;
using ad::Tensor;
using ad::Var;

void SetAbstractionSpec::validate(const std::string& name) const {
  if (n_out <= 0) throw ConfigError(name + ": n_out must be positive");
  if (!(radius > 0.0)) throw ConfigError(name + ": radius must be positive");
  if (mlp.empty()) throw ConfigError(name + ": mlp widths must be nonempty");
  if (k_max <= 0) throw ConfigError(name + ": k_max must be positive");
  for (int w : mlp) {
    if (w <= 0) throw ConfigError(name + ": mlp widths must be positive");
  }
}

RegNetConfig RegNetConfig::config_8k4k() { return RegNetConfig{}; }

RegNetConfig RegNetConfig::config_4k2k() {
  RegNetConfig c;
  c.n_nonground = 4000;
  c.n_ground = 2000;
  return c;
}

RegNetConfig RegNetConfig::miniature() {
  RegNetConfig c;
  c.n_nonground = 14;
  c.n_ground = 6;
  c.ground = {3, 50.0, {4, 4}, 4};
  c.nonground = {{6, 3.0, {4, 4}, 4}, {3, 50.0, {4, 4}, 4}};
  c.embedding = {2, {4, 4}};
  c.final_sa = {2, 50.0, {4, 4}, 4};
  c.head_hidden = 4;
  return c;
}

void RegNetConfig::validate() const {
  if (n_nonground <= 0 || n_ground <= 0) throw ConfigError("regnet: point counts must be positive");
  ground.validate("ground");
  if (nonground.empty()) throw ConfigError("regnet: at least one non-ground abstraction is required");
  for (std::size_t i = 0; i < nonground.size(); ++i) nonground[i].validate("nonground" + std::to_string(i));
  final_sa.validate("final");
  if (ground.n_out > n_ground) throw ConfigError("regnet: ground abstraction asks for more points than sampled");
  if (nonground.front().n_out > n_nonground) {
    throw ConfigError("regnet: non-ground abstraction asks for more points than sampled");
  }
  for (std::size_t i = 1; i < nonground.size(); ++i) {
    if (nonground[i].n_out > nonground[i - 1].n_out) throw ConfigError("regnet: abstraction cannot upsample");
  }
  if (ground.mlp.back() != nonground.back().mlp.back()) {
    throw ConfigError("regnet: ground and non-ground branches must end with the same width");
  }
  if (embedding.k <= 0 || embedding.mlp.empty()) throw ConfigError("regnet: bad embedding spec");
  if (embedding.k > embedding_points()) throw ConfigError("regnet: embedding k exceeds point count");
  if (final_sa.n_out > embedding_points()) throw ConfigError("regnet: final abstraction asks for too many points");
  if (head_hidden <= 0) throw ConfigError("regnet: head width must be positive");
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("regnet: keep_prob must lie in (0, 1]");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("regnet: bn_momentum must lie in [0, 1)");
}

namespace {

nlohmann::json sa_to_json(const SetAbstractionSpec& s) {
  return {{"n_out", s.n_out}, {"radius", s.radius}, {"mlp", s.mlp}, {"k_max", s.k_max}};
}

SetAbstractionSpec sa_from_json(const nlohmann::json& j, const SetAbstractionSpec& def) {
  SetAbstractionSpec s = def;
  s.n_out = j.value("n_out", def.n_out);
  s.radius = j.value("radius", def.radius);
  s.mlp = j.value("mlp", def.mlp);
  s.k_max = j.value("k_max", def.k_max);
  return s;
}

}  // namespace

void to_json(nlohmann::json& j, const RegNetConfig& c) {
  nlohmann::json ng = nlohmann::json::array();
  for (const auto& s : c.nonground) ng.push_back(sa_to_json(s));
  j = {{"n_nonground", c.n_nonground},
       {"n_ground", c.n_ground},
       {"ground", sa_to_json(c.ground)},
       {"nonground", ng},
       {"embedding", {{"k", c.embedding.k}, {"mlp", c.embedding.mlp}}},
       {"final", sa_to_json(c.final_sa)},
       {"head_hidden", c.head_hidden},
       {"keep_prob", c.keep_prob},
       {"bn_momentum", c.bn_momentum},
       {"batch_norm", c.batch_norm},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, RegNetConfig& c) {
  const RegNetConfig d;
  c.n_nonground = j.value("n_nonground", d.n_nonground);
  c.n_ground = j.value("n_ground", d.n_ground);
  if (j.contains("ground")) c.ground = sa_from_json(j.at("ground"), d.ground);
  if (j.contains("nonground")) {
    c.nonground.clear();
    const auto& arr = j.at("nonground");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      c.nonground.push_back(sa_from_json(arr[i], i < d.nonground.size() ? d.nonground[i] : d.nonground.back()));
    }
  }
  if (j.contains("embedding")) {
    c.embedding.k = j.at("embedding").value("k", d.embedding.k);
    c.embedding.mlp = j.at("embedding").value("mlp", d.embedding.mlp);
  }
  if (j.contains("final")) c.final_sa = sa_from_json(j.at("final"), d.final_sa);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.keep_prob = j.value("keep_prob", d.keep_prob);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  c.batch_norm = j.value("batch_norm", d.batch_norm);
  c.init_seed = j.value("init_seed", d.init_seed);
}

DenseLayer make_dense(ad::ParameterStore& store, const std::string& name, int in, int out,
                      bool batch_norm, double momentum, std::mt19937_64& rng) {
  DenseLayer l;
  l.weight = &store.add(name + "/w", ad::he_normal(in, out, rng));
  if (batch_norm) {
    ad::BatchNormParams bn;
    bn.gamma = &store.add(name + "/bn/gamma", Tensor({1, out}, 1.0));
    bn.beta = &store.add(name + "/bn/beta", Tensor({1, out}, 0.0));
    bn.running_mean = &store.add(name + "/bn/running_mean", Tensor({1, out}, 0.0), false);
    bn.running_var = &store.add(name + "/bn/running_var", Tensor({1, out}, 1.0), false);
    bn.momentum = momentum;
    l.bn = bn;
  } else {
    l.bias = &store.add(name + "/b", Tensor({1, out}, 0.0));
  }
  return l;
}

Var norm_act(const DenseLayer& layer, Var pre, const LayerOptions& opt) {
  if (layer.bn) {
    ad::BatchNormParams bn = *layer.bn;
    if (!opt.update_bn_stats) bn.momentum = 1.0;
    return ad::relu(ad::batch_norm(pre, bn, opt.mode));
  }
  return ad::relu(ad::add_bias(pre, pre.graph->param(*layer.bias)));
}

Var dense_forward(const DenseLayer& layer, Var x, const LayerOptions& opt) {
  return norm_act(layer, ad::matmul(x, x.graph->param(*layer.weight)), opt);
}

int CloudBatch::row_offset(std::size_t c) const {
  int r = 0;
  for (std::size_t i = 0; i < c; ++i) r += static_cast<int>(positions[i].rows());
  return r;
}

int CloudBatch::total_rows() const { return row_offset(positions.size()); }

Grouping ball_query_groups(const PointsD& pts, int n_out, double radius, int k_max) {
  Grouping g;
  g.centroid_index = farthest_point_sample(pts, n_out, FpsSeed::nearest_centroid());
  const SpatialGrid grid(pts, radius);
  g.offsets.reserve(static_cast<std::size_t>(n_out) + 1);
  g.offsets.push_back(0);
  for (int c : g.centroid_index) {
    g.members.push_back(c);
    int count = 1;
    for (int j : grid.radius_search(pts.row(c).transpose(), radius)) {
      if (count >= k_max) break;
      if (j == c) continue;
      g.members.push_back(j);
      ++count;
    }
    g.offsets.push_back(static_cast<int>(g.members.size()));
  }
  return g;
}

namespace {

std::uint64_t hash_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t hash_points(std::uint64_t h, const PointsD& pts) {
  const Eigen::Index rows = pts.rows();
  h = hash_bytes(h, &rows, sizeof(rows));
  return hash_bytes(h, pts.data(), static_cast<std::size_t>(pts.size()) * sizeof(double));
}

constexpr std::uint64_t kHashSeed = 14695981039346656037ULL;

}  // namespace

const Grouping& GeometryCache::grouping(const PointsD& pts, int n_out, double radius, int k_max) {
  std::uint64_t h = hash_points(kHashSeed, pts);
  h = hash_bytes(h, &n_out, sizeof(n_out));
  h = hash_bytes(h, &radius, sizeof(radius));
  h = hash_bytes(h, &k_max, sizeof(k_max));
  if (auto it = groups_.find(h); it != groups_.end()) return it->second;
  make_room();
  return groups_.emplace(h, ball_query_groups(pts, n_out, radius, k_max)).first->second;
}

const std::vector<std::vector<int>>& GeometryCache::neighbors(const PointsD& queries, const PointsD& points, int k) {
  std::uint64_t h = hash_points(hash_points(kHashSeed ^ 0x9e3779b97f4a7c15ULL, queries), points);
  h = hash_bytes(h, &k, sizeof(k));
  if (auto it = knn_.find(h); it != knn_.end()) return it->second;
  make_room();
  return knn_.emplace(h, knn_brute_force(queries, points, k)).first->second;
}

void GeometryCache::clear() {
  groups_.clear();
  knn_.clear();
}

void GeometryCache::make_room() {
  if (size() >= capacity_) clear();
}

namespace {

std::vector<DenseLayer> make_mlp(ad::ParameterStore& store, const std::string& name, int in,
                                 const std::vector<int>& widths, bool batch_norm, double momentum,
                                 std::mt19937_64& rng) {
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    layers.push_back(make_dense(store, name + "/l" + std::to_string(i), i == 0 ? in : widths[i - 1],
                                widths[i], batch_norm, momentum, rng));
  }
  return layers;
}

Tensor stack_positions(const std::vector<PointsD>& parts) {
  int rows = 0;
  for (const auto& p : parts) rows += static_cast<int>(p.rows());
  Tensor t({rows, 3});
  int r = 0;
  for (const auto& p : parts) {
    t.mat().middleRows(r, p.rows()) = p;
    r += static_cast<int>(p.rows());
  }
  return t;
}

}  // namespace

SetAbstractionBlock make_set_abstraction(ad::ParameterStore& store, const std::string& name,
                                         const SetAbstractionSpec& spec, int in_channels,
                                         bool batch_norm, double momentum, std::mt19937_64& rng) {
  spec.validate(name);
  SetAbstractionBlock b;
  b.spec = spec;
  b.in_channels = in_channels;
  b.layers = make_mlp(store, name, 3 + in_channels, spec.mlp, batch_norm, momentum, rng);
  return b;
}

CloudBatch set_abstraction(const SetAbstractionBlock& block, const CloudBatch& in, const LayerOptions& opt) {
  Graph* gp = in.feats.valid() ? in.feats.graph : nullptr;
  if (gp == nullptr) throw ShapeError("set_abstraction: input needs a graph (pass features or a constant)");
  Graph& g = *gp;
  const auto& spec = block.spec;

  CloudBatch out;
  std::vector<int> member_rows, member_group, offsets{0};
  int row0 = 0, group0 = 0;
  for (const auto& pts : in.positions) {
    if (spec.n_out > pts.rows()) {
      throw ShapeError("set_abstraction: n_out " + std::to_string(spec.n_out) + " exceeds " +
                       std::to_string(pts.rows()) + " input points");
    }
    Grouping local;
    if (opt.cache == nullptr) local = ball_query_groups(pts, spec.n_out, spec.radius, spec.k_max);
    const Grouping& grp = opt.cache ? opt.cache->grouping(pts, spec.n_out, spec.radius, spec.k_max) : local;
    PointsD cpos(spec.n_out, 3);
    for (int j = 0; j < spec.n_out; ++j) {
      cpos.row(j) = pts.row(grp.centroid_index[static_cast<std::size_t>(j)]);
      for (int m = grp.offsets[static_cast<std::size_t>(j)]; m < grp.offsets[static_cast<std::size_t>(j) + 1]; ++m) {
        member_rows.push_back(row0 + grp.members[static_cast<std::size_t>(m)]);
        member_group.push_back(group0 + j);
      }
      offsets.push_back(static_cast<int>(member_rows.size()));
    }
    out.positions.push_back(std::move(cpos));
    row0 += static_cast<int>(pts.rows());
    group0 += spec.n_out;
  }

  if (in.feats.rows() != row0 || in.feats.cols() != block.in_channels) {
    throw ShapeError("set_abstraction: expected " + std::to_string(row0) + "x" +
                     std::to_string(block.in_channels) + " features, got " +
                     std::to_string(in.feats.rows()) + "x" + std::to_string(in.feats.cols()));
  }
  // First layer on (p_j - c, f_j): project every point once, then subtract
  // the centroid's projection per member.
  const DenseLayer& first = block.layers.front();
  const Var w = g.param(*first.weight);
  const Var pos = g.constant(stack_positions(in.positions));
  const Var proj = ad::matmul(ad::concat_cols({pos, in.feats}), w);
  const Var cproj = ad::matmul(g.constant(stack_positions(out.positions)), ad::slice_rows(w, 0, 3));
  const Var pre = ad::sub(ad::gather_rows(proj, std::move(member_rows)), ad::gather_rows(cproj, std::move(member_group)));
  Var h = norm_act(first, pre, opt);
  for (std::size_t l = 1; l < block.layers.size(); ++l) h = dense_forward(block.layers[l], h, opt);
  out.feats = ad::max_pool_groups(h, std::move(offsets));
  return out;
}

FlowEmbeddingBlock make_flow_embedding(ad::ParameterStore& store, const std::string& name,
                                       const FlowEmbeddingSpec& spec, int channels, bool batch_norm,
                                       double momentum, std::mt19937_64& rng) {
  FlowEmbeddingBlock b;
  b.spec = spec;
  b.channels = channels;
  b.layers = make_mlp(store, name, 3 + 1 + channels, spec.mlp, batch_norm, momentum, rng);
  return b;
}

CloudBatch flow_embedding(const FlowEmbeddingBlock& block, const CloudBatch& first, const CloudBatch& second,
                          const LayerOptions& opt) {
  if (first.positions.size() != second.positions.size()) throw ShapeError("flow_embedding: batch size mismatch");
  Graph& g = *first.feats.graph;
  const int k = block.spec.k;
  std::vector<int> q_rows, n_rows, offsets{0};
  int r1 = 0, r2 = 0;
  for (std::size_t c = 0; c < first.positions.size(); ++c) {
    const PointsD& p1 = first.positions[c];
    const PointsD& p2 = second.positions[c];
    if (p2.rows() < k) {
      throw ShapeError("flow_embedding: frame 2 has " + std::to_string(p2.rows()) + " points, k = " + std::to_string(k));
    }
    std::vector<std::vector<int>> local;
    if (opt.cache == nullptr) local = knn_brute_force(p1, p2, k);
    const auto& nn = opt.cache ? opt.cache->neighbors(p1, p2, k) : local;
    for (int i = 0; i < static_cast<int>(p1.rows()); ++i) {
      for (int j : nn[static_cast<std::size_t>(i)]) {
        q_rows.push_back(r1 + i);
        n_rows.push_back(r2 + j);
      }
      offsets.push_back(static_cast<int>(q_rows.size()));
    }
    r1 += static_cast<int>(p1.rows());
    r2 += static_cast<int>(p2.rows());
  }
  if (first.feats.cols() != block.channels || second.feats.cols() != block.channels) {
    throw ShapeError("flow_embedding: feature width mismatch");
  }

  const DenseLayer& l0 = block.layers.front();
  const Var w = g.param(*l0.weight);
  const Var w_d = ad::slice_rows(w, 0, 3);
  const Var w_c = ad::slice_rows(w, 3, 4);
  const Var w_f = ad::slice_rows(w, 4, 4 + block.channels);
  const Var pos1 = g.constant(stack_positions(first.positions));
  const Var pos2 = g.constant(stack_positions(second.positions));
  const Var p2 = ad::add(ad::matmul(pos2, w_d), ad::matmul(second.feats, w_f));
  const Var p1 = ad::matmul(pos1, w_d);
  const Var cosine = ad::row_cosine(ad::gather_rows(first.feats, q_rows), ad::gather_rows(second.feats, n_rows));
  const Var pre = ad::add(ad::sub(ad::gather_rows(p2, n_rows), ad::gather_rows(p1, q_rows)), ad::matmul(cosine, w_c));
  Var h = norm_act(l0, pre, opt);
  for (std::size_t l = 1; l < block.layers.size(); ++l) h = dense_forward(block.layers[l], h, opt);

  CloudBatch out;
  out.positions = first.positions;
  out.feats = ad::max_pool_groups(h, std::move(offsets));
  return out;
}

RegNet::RegNet(RegNetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.init_seed);
  const bool bn = cfg_.batch_norm;
  const double m = cfg_.bn_momentum;
  ground_ = make_set_abstraction(store_, "ground/sa0", cfg_.ground, 3, bn, m, rng);
  int in = 3;
  for (std::size_t i = 0; i < cfg_.nonground.size(); ++i) {
    nonground_.push_back(make_set_abstraction(store_, "nonground/sa" + std::to_string(i), cfg_.nonground[i], in, bn, m, rng));
    in = cfg_.nonground[i].mlp.back();
  }
  embedding_ = make_flow_embedding(store_, "embedding", cfg_.embedding, cfg_.embedding_channels(), bn, m, rng);
  final_ = make_set_abstraction(store_, "final/sa0", cfg_.final_sa, cfg_.embedding.mlp.back(), bn, m, rng);
  rot_head_[0] = make_dense(store_, "head/rot/l0", cfg_.flat_size(), cfg_.head_hidden, false, m, rng);
  rot_head_[1] = make_dense(store_, "head/rot/l1", cfg_.head_hidden, 3, false, m, rng);
  trans_head_[0] = make_dense(store_, "head/trans/l0", cfg_.flat_size(), cfg_.head_hidden, false, m, rng);
  trans_head_[1] = make_dense(store_, "head/trans/l1", cfg_.head_hidden, 3, false, m, rng);
}

namespace {

Var head_forward(Graph& g, const std::array<DenseLayer, 2>& head, Var x) {
  const Var h = ad::relu(ad::linear(x, g.param(*head[0].weight), g.param(*head[0].bias)));
  return ad::linear(h, g.param(*head[1].weight), g.param(*head[1].bias));
}

Tensor rows_of(const Var& v, int begin, int count) {
  Tensor t({count, v.cols()});
  t.mat() = v.value().mat().middleRows(begin, count);
  return t;
}

}  // namespace

RegNetOutput RegNet::forward(Graph& g, std::span<const FramePair* const> pairs, const ForwardOptions& opt) {
  if (pairs.empty()) throw ShapeError("regnet forward: empty batch");
  const LayerOptions lo{opt.mode, opt.update_bn_stats, opt.use_cache ? &cache_ : nullptr};

  // Frames in batch order: source_0, target_0, source_1, target_1, ...
  CloudBatch ng, gr;
  for (const FramePair* p : pairs) {
    for (const PointCloud* c : {&p->source, &p->target}) {
      if (c->is_ground.size() != c->size()) throw ShapeError("regnet forward: ground flags do not match points");
      gr.positions.push_back(c->select(true));
      ng.positions.push_back(c->select(false));
    }
  }
  gr.feats = g.constant(stack_positions(gr.positions));
  ng.feats = g.constant(stack_positions(ng.positions));

  const CloudBatch gout = set_abstraction(ground_, gr, lo);
  CloudBatch nout = ng;
  for (const auto& block : nonground_) nout = set_abstraction(block, nout, lo);

  // Per frame: ground rows then non-ground rows.
  const int n_g = cfg_.ground.n_out, n_n = cfg_.nonground.back().n_out, n_e = n_g + n_n;
  const std::size_t frames = gr.positions.size();
  std::vector<int> order;
  order.reserve(frames * static_cast<std::size_t>(n_e));
  for (std::size_t f = 0; f < frames; ++f) {
    for (int i = 0; i < n_g; ++i) order.push_back(static_cast<int>(f) * n_g + i);
    for (int i = 0; i < n_n; ++i) order.push_back(static_cast<int>(frames) * n_g + static_cast<int>(f) * n_n + i);
  }
  const Var merged = ad::gather_rows(ad::concat_rows({gout.feats, nout.feats}), std::move(order));
  std::vector<PointsD> merged_pos(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    merged_pos[f].resize(n_e, 3);
    merged_pos[f].topRows(n_g) = gout.positions[f];
    merged_pos[f].bottomRows(n_n) = nout.positions[f];
  }

  CloudBatch first, second;
  std::vector<int> src_rows, tgt_rows;
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    first.positions.push_back(merged_pos[2 * b]);
    second.positions.push_back(merged_pos[2 * b + 1]);
    for (int i = 0; i < n_e; ++i) {
      src_rows.push_back(static_cast<int>(2 * b) * n_e + i);
      tgt_rows.push_back(static_cast<int>(2 * b + 1) * n_e + i);
    }
  }
  first.feats = ad::gather_rows(merged, std::move(src_rows));
  second.feats = ad::gather_rows(merged, std::move(tgt_rows));

  const CloudBatch emb = flow_embedding(embedding_, first, second, lo);
  const CloudBatch fin = set_abstraction(final_, emb, lo);
  const int batch = static_cast<int>(pairs.size());
  const Var flat = ad::reshape(fin.feats, {batch, cfg_.flat_size()});

  RegNetOutput out;
  if (opt.capture_taps) {
    out.taps.resize(pairs.size());
    for (int b = 0; b < batch; ++b) {
      TapFeatures& t = out.taps[static_cast<std::size_t>(b)];
      for (int f = 0; f < 2; ++f) {
        t.pref_positions[static_cast<std::size_t>(f)] = merged_pos[static_cast<std::size_t>(2 * b + f)];
        t.pref[static_cast<std::size_t>(f)] = rows_of(merged, (2 * b + f) * n_e, n_e);
      }
      t.posf_positions = emb.positions[static_cast<std::size_t>(b)];
      t.posf = rows_of(emb.feats, b * n_e, n_e);
      t.fclf = rows_of(flat, b, 1);
    }
  }

  Var x = flat;
  if (opt.mode == ad::Mode::kTrain && opt.dropout && cfg_.keep_prob < 1.0) {
    if (opt.rng == nullptr) throw ConfigError("regnet forward: training-mode dropout needs an rng");
    x = ad::dropout(x, cfg_.keep_prob, ad::Mode::kTrain, *opt.rng);
  }
  out.rot = head_forward(g, rot_head_, x);
  out.trans = head_forward(g, trans_head_, x);
  return out;
}

std::array<double, 6> RegNet::predict(const FramePair& pair) {
  Graph g;
  const FramePair* p = &pair;
  const auto out = forward(g, std::span<const FramePair* const>(&p, 1), ForwardOptions{});
  std::array<double, 6> r{};
  for (int i = 0; i < 3; ++i) {
    r[static_cast<std::size_t>(i)] = out.rot.value()[static_cast<std::size_t>(i)];
    r[static_cast<std::size_t>(i) + 3] = out.trans.value()[static_cast<std::size_t>(i)];
  }
  return r;
}

TapFeatures RegNet::taps(const FramePair& pair) {
  Graph g;
  const FramePair* p = &pair;
  ForwardOptions opt;
  opt.capture_taps = true;
  auto out = forward(g, std::span<const FramePair* const>(&p, 1), opt);
  return std::move(out.taps.front());
}

}  // namespace podom
