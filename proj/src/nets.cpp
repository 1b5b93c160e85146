#include "shev/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "shev/error.hpp"

namespace shev::nets {

std::string to_string(Family f) {
  switch (f) {
    case Family::FFN: return "ffn";
    case Family::GRU: return "gru";
    case Family::DT: return "dt";
  }
  return "?";
}

Family parse_family(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "ffn") return Family::FFN;
  if (lower == "gru") return Family::GRU;
  if (lower == "dt") return Family::DT;
  throw ConfigError("unknown network family '" + std::string(s) + "' (expected ffn, gru or dt)");
}

void NetConfig::validate() const {
  if (hidden <= 0 || depth <= 0 || state_dim <= 0 || action_dim <= 0) throw ConfigError("network sizes must be positive");
  if (context_k < 1) throw ConfigError("context length must be >= 1");
  if (family == Family::DT) {
    if (heads <= 0 || hidden % heads != 0) throw ConfigError("attention heads must divide the hidden width");
    if (ff_mult <= 0 || max_timestep <= 0) throw ConfigError("DT feedforward and timestep sizes must be positive");
  }
}

NetConfig make_config(Family f, Role role, int context_k, int hidden) {
  NetConfig c;
  c.family = f;
  c.role = role;
  c.hidden = hidden;
  c.context_k = context_k;
  c.depth = f == Family::DT ? 1 : 2;
  c.validate();
  return c;
}

// --- ParamSet ---------------------------------------------------------------

void ParamSet::add(std::string name, Matrix value) {
  if (find(name)) throw ShapeError("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), std::move(value)});
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

std::optional<std::size_t> ParamSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return i;
  return std::nullopt;
}

const Matrix& ParamSet::operator[](std::string_view name) const {
  auto i = find(name);
  if (!i) throw ShapeError("no parameter named '" + std::string(name) + "'");
  return entries_[*i].value;
}

Matrix& ParamSet::operator[](std::string_view name) {
  auto i = find(name);
  if (!i) throw ShapeError("no parameter named '" + std::string(name) + "'");
  return entries_[*i].value;
}

Eigen::VectorXd ParamSet::flat() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(count()));
  Eigen::Index off = 0;
  for (const auto& e : entries_) {
    out.segment(off, e.value.size()) = Eigen::Map<const Eigen::VectorXd>(e.value.data(), e.value.size());
    off += e.value.size();
  }
  return out;
}

void ParamSet::set_flat(const Eigen::VectorXd& x) {
  if (x.size() != static_cast<Eigen::Index>(count())) throw ShapeError("flat vector length does not match ParamSet");
  Eigen::Index off = 0;
  for (auto& e : entries_) {
    Eigen::Map<Eigen::VectorXd>(e.value.data(), e.value.size()) = x.segment(off, e.value.size());
    off += e.value.size();
  }
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  for (const auto& e : entries_) z.entries_.push_back({e.name, Matrix::Zero(e.value.rows(), e.value.cols())});
  return z;
}

bool ParamSet::same_shape(const ParamSet& o) const {
  if (o.entries_.size() != entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != o.entries_[i].name || entries_[i].value.rows() != o.entries_[i].value.rows() ||
        entries_[i].value.cols() != o.entries_[i].value.cols())
      return false;
  }
  return true;
}

bool ParamSet::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(), [](const Entry& e) { return e.value.allFinite(); });
}

bool ParamSet::operator==(const ParamSet& o) const {
  if (!same_shape(o)) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].value != o.entries_[i].value) return false;
  return true;
}

// --- initialization -----------------------------------------------------------

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Matrix uniform(int rows, int cols, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng_);
    return m;
  }

  Matrix embedding(int rows, int cols) {
    std::normal_distribution<double> n(0.0, 0.02);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng_);
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

void add_linear(ParamSet& p, Initializer& init, const std::string& prefix, int in, int out) {
  p.add(prefix + ".w", init.uniform(in, out, in));
  p.add(prefix + ".b", Matrix::Zero(1, out));
}

void add_norm(ParamSet& p, const std::string& prefix, int width) {
  p.add(prefix + ".g", Matrix::Ones(1, width));
  p.add(prefix + ".b", Matrix::Zero(1, width));
}

}  // namespace

ParamSet init_params(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Initializer init(seed);
  ParamSet p;
  const int h = cfg.hidden;
  switch (cfg.family) {
    case Family::FFN: {
      int in = cfg.input_dim();
      for (int l = 0; l < cfg.depth; ++l) {
        add_linear(p, init, "l" + std::to_string(l), in, h);
        in = h;
      }
      break;
    }
    case Family::GRU: {
      int in = cfg.input_dim();
      for (int l = 0; l < cfg.depth; ++l) {
        const std::string g = "gru" + std::to_string(l);
        p.add(g + ".wx", init.uniform(in, 3 * h, h));
        p.add(g + ".uzr", init.uniform(h, 2 * h, h));
        p.add(g + ".uh", init.uniform(h, h, h));
        p.add(g + ".b", Matrix::Zero(1, 3 * h));
        in = h;
      }
      break;
    }
    case Family::DT: {
      add_linear(p, init, "emb_r", 1, h);
      add_linear(p, init, "emb_s", cfg.state_dim, h);
      add_linear(p, init, "emb_a", cfg.action_dim, h);
      p.add("emb_t", init.embedding(cfg.max_timestep, h));
      add_norm(p, "ln_emb", h);
      for (int b = 0; b < cfg.depth; ++b) {
        const std::string blk = "blk" + std::to_string(b);
        add_norm(p, blk + ".ln1", h);
        add_linear(p, init, blk + ".q", h, h);
        add_linear(p, init, blk + ".k", h, h);
        add_linear(p, init, blk + ".v", h, h);
        add_linear(p, init, blk + ".o", h, h);
        add_norm(p, blk + ".ln2", h);
        add_linear(p, init, blk + ".ff1", h, cfg.ff_mult * h);
        add_linear(p, init, blk + ".ff2", cfg.ff_mult * h, h);
      }
      add_norm(p, "ln_f", h);
      break;
    }
  }
  add_linear(p, init, "out", h, cfg.output_dim());
  return p;
}

// --- forward passes -----------------------------------------------------------

Bound::Bound(Tape& tape, const ParamSet& p, ParamSet* grads) : tape_(&tape), set_(&p) {
  if (grads && !grads->same_shape(p)) throw ShapeError("gradient buffer does not match parameters");
  vars_.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) vars_.push_back(tape.param(p.value(i), grads ? &grads->value(i) : nullptr));
}

Var Bound::operator()(std::string_view name) const {
  auto i = set_->find(name);
  if (!i) throw ShapeError("network has no parameter '" + std::string(name) + "'");
  return vars_[*i];
}

Var linear(const Bound& p, const std::string& prefix, Var x) {
  return ad::add_rowvec(ad::matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

Var ffn_forward(const Bound& p, Var x, int depth) {
  for (int l = 0; l < depth; ++l) x = ad::relu(linear(p, "l" + std::to_string(l), x));
  return linear(p, "out", x);
}

GruResult gru_forward(const Bound& p, std::span<const Var> xs, std::span<const Var> h0, int layers) {
  if (xs.empty()) throw ShapeError("GRU needs a sequence of length >= 1");
  Tape& tape = p.tape();
  GruResult res;
  std::vector<Var> inputs(xs.begin(), xs.end());
  const auto batch = xs.front().rows();
  for (int l = 0; l < layers; ++l) {
    const std::string g = "gru" + std::to_string(l);
    const Var wx = p(g + ".wx"), uzr = p(g + ".uzr"), uh = p(g + ".uh"), b = p(g + ".b");
    const auto h = uh.rows();
    Var state;
    if (h0.empty()) {
      state = tape.constant(Matrix::Zero(batch, h));
    } else {
      if (static_cast<int>(h0.size()) != layers || h0[static_cast<std::size_t>(l)].rows() != batch ||
          h0[static_cast<std::size_t>(l)].cols() != h)
        throw ShapeError("GRU initial hidden state has the wrong shape");
      state = h0[static_cast<std::size_t>(l)];
    }
    std::vector<Var> outs;
    outs.reserve(inputs.size());
    for (const Var& x : inputs) {
      if (x.cols() != wx.rows()) throw ShapeError("GRU input width mismatch");
      const Var xw = ad::add_rowvec(ad::matmul(x, wx), b);
      const Var hu = ad::matmul(state, uzr);
      const Var z = ad::sigmoid(ad::add(ad::slice_cols(xw, 0, h), ad::slice_cols(hu, 0, h)));
      const Var r = ad::sigmoid(ad::add(ad::slice_cols(xw, h, h), ad::slice_cols(hu, h, h)));
      const Var cand = ad::tanh(ad::add(ad::slice_cols(xw, 2 * h, h), ad::matmul(ad::mul(r, state), uh)));
      // h' = (1 - z) * cand + z * h
      state = ad::add(cand, ad::mul(z, ad::sub(state, cand)));
      outs.push_back(state);
    }
    res.h_final.push_back(state);
    inputs = std::move(outs);
  }
  res.outputs = std::move(inputs);
  return res;
}

std::vector<Var> dt_forward(const Bound& p, const NetConfig& cfg, const WindowVars& w, DtReadout readout) {
  const int k = w.length();
  const int batch = w.batch();
  if (static_cast<int>(w.actions.size()) != k || static_cast<int>(w.rtg.size()) != k ||
      static_cast<int>(w.timesteps.size()) != k)
    throw ShapeError("DT token streams must hold 3 tokens per step");
  const Var table = p("emb_t");
  std::vector<Var> tokens;
  tokens.reserve(static_cast<std::size_t>(3 * k));
  for (int j = 0; j < k; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
      const int ts = w.timesteps[ju][static_cast<std::size_t>(b)];
      if (ts < 0) throw ShapeError("DT timesteps must be non-negative");
      idx[static_cast<std::size_t>(b)] = std::min(ts, cfg.max_timestep - 1);
    }
    const Var temb = ad::gather_rows(table, std::move(idx));
    tokens.push_back(ad::add(linear(p, "emb_r", w.rtg[ju]), temb));
    tokens.push_back(ad::add(linear(p, "emb_s", w.states[ju]), temb));
    tokens.push_back(ad::add(linear(p, "emb_a", w.actions[ju]), temb));
  }
  // Stacked rows are token-major; reorder to sample-major for attention.
  const Var stacked = ad::vcat(tokens);
  const int seq = 3 * k;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(batch * seq));
  for (int b = 0; b < batch; ++b)
    for (int s = 0; s < seq; ++s) order[static_cast<std::size_t>(b * seq + s)] = static_cast<Eigen::Index>(s) * batch + b;
  Var x = ad::layer_norm(ad::gather_rows(stacked, std::move(order)), p("ln_emb.g"), p("ln_emb.b"));

  for (int blk = 0; blk < cfg.depth; ++blk) {
    const std::string pre = "blk" + std::to_string(blk);
    const Var hn = ad::layer_norm(x, p(pre + ".ln1.g"), p(pre + ".ln1.b"));
    const Var att = ad::causal_attention(linear(p, pre + ".q", hn), linear(p, pre + ".k", hn),
                                         linear(p, pre + ".v", hn), batch, seq, cfg.heads);
    x = ad::add(x, linear(p, pre + ".o", att));
    const Var hn2 = ad::layer_norm(x, p(pre + ".ln2.g"), p(pre + ".ln2.b"));
    x = ad::add(x, linear(p, pre + ".ff2", ad::relu(linear(p, pre + ".ff1", hn2))));
  }
  x = ad::layer_norm(x, p("ln_f.g"), p("ln_f.b"));

  const int offset = readout == DtReadout::state_token ? 1 : 2;
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) rows[static_cast<std::size_t>(b)] = static_cast<Eigen::Index>(b) * seq + 3 * j + offset;
    out.push_back(ad::gather_rows(x, std::move(rows)));
  }
  return out;
}

std::vector<Var> net_forward(const NetConfig& cfg, const Bound& p, const WindowVars& w, std::span<const Var> h0,
                             std::vector<Var>* h_final) {
  const int k = w.length();
  if (k < 1) throw ShapeError("empty window");
  std::vector<Var> out;
  auto step_input = [&](int j) {
    const auto ju = static_cast<std::size_t>(j);
    if (w.states[ju].cols() != cfg.state_dim) throw ShapeError("state width mismatch");
    if (cfg.role == Role::actor) return w.states[ju];
    if (w.actions[ju].cols() != cfg.action_dim) throw ShapeError("action width mismatch");
    const Var parts[] = {w.states[ju], w.actions[ju]};
    return ad::hcat(parts);
  };
  switch (cfg.family) {
    case Family::FFN:
      for (int j = 0; j < k; ++j) out.push_back(ffn_forward(p, step_input(j), cfg.depth));
      break;
    case Family::GRU: {
      std::vector<Var> xs;
      for (int j = 0; j < k; ++j) xs.push_back(step_input(j));
      auto res = gru_forward(p, xs, h0, cfg.depth);
      for (const Var& h : res.outputs) out.push_back(linear(p, "out", h));
      if (h_final) *h_final = std::move(res.h_final);
      break;
    }
    case Family::DT: {
      auto hs = dt_forward(p, cfg, w,
                           cfg.role == Role::actor ? DtReadout::state_token : DtReadout::action_token);
      for (const Var& h : hs) out.push_back(linear(p, "out", h));
      break;
    }
  }
  return out;
}

// --- policy head ---------------------------------------------------------------

PolicyVars sample_policy(Var head_out, int action_dim, const Matrix& noise) {
  Tape& tape = *head_out.tape();
  if (head_out.cols() != 2 * action_dim || noise.rows() != head_out.rows() || noise.cols() != action_dim)
    throw ShapeError("policy head / noise shape mismatch");
  const Var mean = ad::slice_cols(head_out, 0, action_dim);
  const Var log_std = ad::clamp(ad::slice_cols(head_out, action_dim, action_dim), kLogStdMin, kLogStdMax);
  const Var u = ad::add(mean, ad::mul(ad::exp(log_std), tape.constant(noise)));
  // log N(u; mean, std) = -noise^2/2 - log std - log(2 pi)/2 under the reparameterization.
  const Matrix base = (-0.5 * noise.array().square() - 0.5 * std::log(2.0 * std::numbers::pi)).matrix();
  const Var logp = ad::sub(ad::sub(tape.constant(base), log_std), ad::squash_log_det(u, kSquashEps));
  return {ad::clamp(ad::tanh(u), -kActionLimit, kActionLimit), ad::row_sum(logp), ad::tanh(mean)};
}

PolicyOutput gaussian_head(const Eigen::VectorXd& mean, const Eigen::VectorXd& log_std, const Eigen::VectorXd& noise) {
  if (mean.size() != log_std.size() || mean.size() != noise.size()) throw ShapeError("policy head size mismatch");
  PolicyOutput out;
  out.mean = mean;
  out.log_std = log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  const Eigen::ArrayXd std_dev = out.log_std.array().exp();
  const Eigen::ArrayXd u = mean.array() + std_dev * noise.array();
  out.action = u.tanh().max(-kActionLimit).min(kActionLimit).matrix();
  const Eigen::ArrayXd z = (u - mean.array()) / std_dev;
  const Eigen::ArrayXd lp = -0.5 * z.square() - out.log_std.array() - 0.5 * std::log(2.0 * std::numbers::pi) -
                            (1.0 - u.tanh().square() + kSquashEps).log();
  out.log_prob = lp.sum();
  return out;
}

// --- gradient check ---------------------------------------------------------------

double grad_check(const LossFn& f, const ParamSet& p, double eps, std::uint64_t seed, int samples) {
  if (!(eps > 0.0)) throw ConfigError("finite-difference step must be positive");
  ParamSet grad = p.zeros_like();
  const double f0 = f(p, &grad);
  if (!std::isfinite(f0)) throw NumericError("loss is not finite at the check point");
  const Eigen::VectorXd analytic = grad.flat();
  const Eigen::VectorXd x0 = p.flat();
  const auto n = x0.size();

  std::vector<Eigen::Index> coords(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(std::min<std::size_t>(coords.size(), static_cast<std::size_t>(samples)));

  ParamSet probe = p;
  double worst = 0.0;
  for (auto i : coords) {
    Eigen::VectorXd x = x0;
    x(i) = x0(i) + eps;
    probe.set_flat(x);
    const double fp = f(probe, nullptr);
    x(i) = x0(i) - eps;
    probe.set_flat(x);
    const double fm = f(probe, nullptr);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("loss is not finite near the check point");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(numeric - analytic(i)) / std::max(1e-8, std::abs(analytic(i)) + std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

// --- checkpoints -------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'H', 'E', 'V', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T x) {
  char buf[sizeof(T)];
  std::memcpy(buf, &x, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_str(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T x;
    std::memcpy(&x, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return x;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("truncated checkpoint");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Matrix& Checkpoint::array(std::string_view name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return m;
  throw FormatError("checkpoint has no array '" + std::string(name) + "'");
}

std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& [name, m] : c.arrays) {
    put_str(out, name);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(out, m(i, j));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError("not a checkpoint file (bad magic)");
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  const auto nmeta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    auto k = r.str();
    c.meta[k] = r.str();
  }
  const auto narr = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < narr; ++i) {
    auto name = r.str();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index a = 0; a < m.rows(); ++a)
      for (Eigen::Index b = 0; b < m.cols(); ++b) m(a, b) = r.get<double>();
    c.arrays.emplace_back(std::move(name), std::move(m));
  }
  if (!r.done()) throw FormatError("trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write checkpoint '" + path + "'");
  const auto bytes = encode_checkpoint(c);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

void put_net(Checkpoint& c, const std::string& prefix, const NetConfig& cfg, const ParamSet& p) {
  c.meta[prefix + ".family"] = to_string(cfg.family);
  c.meta[prefix + ".role"] = cfg.role == Role::actor ? "actor" : "critic";
  c.meta[prefix + ".hidden"] = std::to_string(cfg.hidden);
  c.meta[prefix + ".depth"] = std::to_string(cfg.depth);
  c.meta[prefix + ".heads"] = std::to_string(cfg.heads);
  c.meta[prefix + ".context_k"] = std::to_string(cfg.context_k);
  c.meta[prefix + ".state_dim"] = std::to_string(cfg.state_dim);
  c.meta[prefix + ".action_dim"] = std::to_string(cfg.action_dim);
  c.meta[prefix + ".ff_mult"] = std::to_string(cfg.ff_mult);
  c.meta[prefix + ".max_timestep"] = std::to_string(cfg.max_timestep);
  for (std::size_t i = 0; i < p.size(); ++i) c.arrays.emplace_back(prefix + "/" + p.entry(i).name, p.value(i));
}

std::pair<NetConfig, ParamSet> get_net(const Checkpoint& c, const std::string& prefix) {
  auto meta = [&](const std::string& k) -> const std::string& {
    auto it = c.meta.find(prefix + "." + k);
    if (it == c.meta.end()) throw FormatError("checkpoint missing '" + prefix + "." + k + "'");
    return it->second;
  };
  auto integer = [&](const std::string& k) { return std::stoi(meta(k)); };
  NetConfig cfg;
  cfg.family = parse_family(meta("family"));
  cfg.role = meta("role") == "actor" ? Role::actor : Role::critic;
  cfg.hidden = integer("hidden");
  cfg.depth = integer("depth");
  cfg.heads = integer("heads");
  cfg.context_k = integer("context_k");
  cfg.state_dim = integer("state_dim");
  cfg.action_dim = integer("action_dim");
  cfg.ff_mult = integer("ff_mult");
  cfg.max_timestep = integer("max_timestep");
  cfg.validate();
  ParamSet p = init_params(cfg, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Matrix& m = c.array(prefix + "/" + p.entry(i).name);
    if (m.rows() != p.value(i).rows() || m.cols() != p.value(i).cols())
      throw ShapeError("checkpoint array '" + p.entry(i).name + "' has the wrong shape");
    p.value(i) = m;
  }
  return {cfg, p};
}

}  // namespace shev::nets
