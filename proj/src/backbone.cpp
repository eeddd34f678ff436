// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/backbone.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "protoprompt/binary_io.hpp"

namespace protoprompt {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr std::uint32_t kBackboneVersion = 1;

void layer_norm_rows(const Matrix& x, const LayerNormParams& p, Matrix& y, Matrix& xhat, Vector& rstd) {
  const std::size_t d = x.cols;
  y = Matrix(x.rows, d);
  xhat = Matrix(x.rows, d);
  rstd.assign(x.rows, 0.0);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (row[c] - mean) * inv;
      xhat(r, c) = xh;
      y(r, c) = xh * p.gain[c] + p.bias[c];
    }
  }
}

// Adds the input gradient of a row-wise layer norm into `dx`.
void layer_norm_backward_rows(const Matrix& dy, const Matrix& xhat, const Vector& rstd, const LayerNormParams& p,
                              Matrix& dx, LayerNormParams* grads) {
  const std::size_t d = dy.cols;
  Vector dxhat(d);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dxhat[c] = dy(r, c) * p.gain[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xhat(r, c);
      if (grads) {
        grads->gain[c] += dy(r, c) * xhat(r, c);
        grads->bias[c] += dy(r, c);
      }
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) += rstd[r] * (dxhat[c] - mean_dxhat - xhat(r, c) * mean_dxhat_xhat);
    }
  }
}

void add_row_bias(Matrix& m, const Vector& bias) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) m(r, c) += bias[c];
  }
}

void accumulate_column_sums(const Matrix& m, Vector& out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += m(r, c);
  }
}

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double u) {
  const double inner = kGeluScale * (u + 0.044715 * u * u * u);
  return 0.5 * u * (1.0 + std::tanh(inner));
}

double gelu_grad(double u) {
  const double inner = kGeluScale * (u + 0.044715 * u * u * u);
  const double t = std::tanh(inner);
  const double dinner = kGeluScale * (1.0 + 3.0 * 0.044715 * u * u);
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner;
}

Matrix assemble_sequence(std::span<const double> class_token, const Matrix& prompt, const Matrix& tokens) {
  const std::size_t d = tokens.cols;
  Matrix x(1 + prompt.rows + tokens.rows, d);
  std::copy(class_token.begin(), class_token.end(), x.row(0).begin());
  for (std::size_t r = 0; r < prompt.rows; ++r) {
    std::copy(prompt.row(r).begin(), prompt.row(r).end(), x.row(1 + r).begin());
  }
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    std::copy(tokens.row(r).begin(), tokens.row(r).end(), x.row(1 + prompt.rows + r).begin());
  }
  return x;
}

// Full block over the assembled sequence; returns the block output (n x D).
Matrix block_forward(const BackboneConfig& cfg, const LayerWeights& w, const Matrix& x, LayerTrace& t) {
  const std::size_t n = x.rows;
  const std::size_t d = cfg.embed_dim;
  const std::size_t heads = cfg.num_heads;
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  t.input = x;
  layer_norm_rows(x, w.ln_attn, t.attn_norm, t.attn_xhat, t.attn_rstd);
  matmul(t.attn_norm, w.w_query, t.query);
  add_row_bias(t.query, w.b_query);
  matmul(t.attn_norm, w.w_key, t.key);
  add_row_bias(t.key, w.b_key);
  matmul(t.attn_norm, w.w_value, t.value);
  add_row_bias(t.value, w.b_value);

  t.probs.assign(heads, Matrix(n, n));
  t.attended = Matrix(n, d);
  Vector scores(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    Matrix& p = t.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < hd; ++k) s += t.query(i, off + k) * t.key(j, off + k);
        scores[j] = s * scale;
        peak = std::max(peak, scores[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - peak);
        total += scores[j];
      }
      for (std::size_t j = 0; j < n; ++j) p(i, j) = scores[j] / total;
      for (std::size_t j = 0; j < n; ++j) {
        const double pij = p(i, j);
        for (std::size_t k = 0; k < hd; ++k) t.attended(i, off + k) += pij * t.value(j, off + k);
      }
    }
  }

  Matrix attn_out;
  matmul(t.attended, w.w_out, attn_out);
  add_row_bias(attn_out, w.b_out);
  t.residual = x;
  for (std::size_t i = 0; i < t.residual.data.size(); ++i) t.residual.data[i] += attn_out.data[i];

  layer_norm_rows(t.residual, w.ln_mlp, t.mlp_norm, t.mlp_xhat, t.mlp_rstd);
  matmul(t.mlp_norm, w.w_hidden, t.pre_act);
  add_row_bias(t.pre_act, w.b_hidden);
  t.act = t.pre_act;
  for (double& v : t.act.data) v = gelu(v);
  Matrix mlp_out;
  matmul(t.act, w.w_proj, mlp_out);
  add_row_bias(mlp_out, w.b_proj);

  Matrix out = t.residual;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += mlp_out.data[i];
  return out;
}

// Reverse pass through one block. Returns d(input); accumulates weight
// gradients when `g` is non-null.
Matrix block_backward(const BackboneConfig& cfg, const LayerWeights& w, const LayerTrace& t, const Matrix& dout,
                      LayerWeights* g) {
  const std::size_t n = t.input.rows;
  const std::size_t d = cfg.embed_dim;
  const std::size_t heads = cfg.num_heads;
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Feed-forward branch.
  Matrix dact;
  matmul_a_bt(dout, w.w_proj, dact);
  if (g) {
    matmul_at_b_acc(t.act, dout, g->w_proj);
    accumulate_column_sums(dout, g->b_proj);
  }
  Matrix dpre = dact;
  for (std::size_t i = 0; i < dpre.data.size(); ++i) dpre.data[i] *= gelu_grad(t.pre_act.data[i]);
  Matrix dmlp_norm;
  matmul_a_bt(dpre, w.w_hidden, dmlp_norm);
  if (g) {
    matmul_at_b_acc(t.mlp_norm, dpre, g->w_hidden);
    accumulate_column_sums(dpre, g->b_hidden);
  }
  Matrix dresidual = dout;
  layer_norm_backward_rows(dmlp_norm, t.mlp_xhat, t.mlp_rstd, w.ln_mlp, dresidual, g ? &g->ln_mlp : nullptr);

  // Attention branch.
  Matrix dattended;
  matmul_a_bt(dresidual, w.w_out, dattended);
  if (g) {
    matmul_at_b_acc(t.attended, dresidual, g->w_out);
    accumulate_column_sums(dresidual, g->b_out);
  }
  Matrix dq(n, d), dk(n, d), dv(n, d);
  Vector dprob(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    const Matrix& p = t.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      double weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < hd; ++k) s += dattended(i, off + k) * t.value(j, off + k);
        dprob[j] = s;
        weighted += s * p(i, j);
        const double pij = p(i, j);
        for (std::size_t k = 0; k < hd; ++k) dv(j, off + k) += pij * dattended(i, off + k);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double dscore = p(i, j) * (dprob[j] - weighted) * scale;
        if (dscore == 0.0) continue;
        for (std::size_t k = 0; k < hd; ++k) {
          dq(i, off + k) += dscore * t.key(j, off + k);
          dk(j, off + k) += dscore * t.query(i, off + k);
        }
      }
    }
  }
  Matrix dattn_norm, tmp;
  matmul_a_bt(dq, w.w_query, dattn_norm);
  matmul_a_bt(dk, w.w_key, tmp);
  for (std::size_t i = 0; i < tmp.data.size(); ++i) dattn_norm.data[i] += tmp.data[i];
  matmul_a_bt(dv, w.w_value, tmp);
  for (std::size_t i = 0; i < tmp.data.size(); ++i) dattn_norm.data[i] += tmp.data[i];
  if (g) {
    matmul_at_b_acc(t.attn_norm, dq, g->w_query);
    matmul_at_b_acc(t.attn_norm, dk, g->w_key);
    matmul_at_b_acc(t.attn_norm, dv, g->w_value);
    accumulate_column_sums(dq, g->b_query);
    accumulate_column_sums(dk, g->b_key);
    accumulate_column_sums(dv, g->b_value);
  }
  Matrix dx = dresidual;
  layer_norm_backward_rows(dattn_norm, t.attn_xhat, t.attn_rstd, w.ln_attn, dx, g ? &g->ln_attn : nullptr);
  return dx;
}

void check_tokens(const BackboneConfig& cfg, const Matrix& x) {
  require(x.rows == cfg.seq_len && x.cols == cfg.embed_dim, ErrorKind::ShapeError,
          "token sequence must be " + std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.embed_dim));
}

void check_prompts(const BackboneConfig& cfg, const PromptSet& prompts) {
  require(prompts.layers.size() == cfg.num_layers, ErrorKind::ConfigError,
          "prompt set has " + std::to_string(prompts.layers.size()) + " layers, backbone has " +
              std::to_string(cfg.num_layers));
  for (const auto& block : prompts.layers) {
    require(block.rows == 0 || block.cols == cfg.embed_dim, ErrorKind::ShapeError, "prompt width mismatch");
  }
}

const Matrix& empty_block() {
  static const Matrix empty;
  return empty;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = stddev * rng.normal();
  return m;
}

LayerNormParams identity_norm(std::size_t d) { return {Vector(d, 1.0), Vector(d, 0.0)}; }
LayerNormParams zero_norm(std::size_t d) { return {Vector(d, 0.0), Vector(d, 0.0)}; }

BackboneWeights make_weights(const BackboneConfig& cfg, Rng* rng) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t hidden = cfg.mlp_hidden;
  auto mat = [&](std::size_t r, std::size_t c, double sd) {
    return rng ? random_matrix(r, c, sd, *rng) : Matrix(r, c);
  };
  auto vec = [&](std::size_t n, double sd) {
    Vector v(n, 0.0);
    if (rng && sd > 0.0) {
      for (double& x : v) x = sd * rng->normal();
    }
    return v;
  };
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_h = 1.0 / std::sqrt(static_cast<double>(hidden));

  BackboneWeights w;
  w.input_proj = mat(d, d, sd_d);
  w.input_bias = vec(d, 0.0);
  w.position = mat(cfg.seq_len, d, 0.1);
  w.class_token = vec(d, 0.1);
  w.layers.resize(cfg.num_layers);
  for (auto& layer : w.layers) {
    layer.ln_attn = rng ? identity_norm(d) : zero_norm(d);
    layer.w_query = mat(d, d, sd_d);
    layer.w_key = mat(d, d, sd_d);
    layer.w_value = mat(d, d, sd_d);
    layer.w_out = mat(d, d, 0.5 * sd_d);
    layer.b_query = vec(d, 0.0);
    layer.b_key = vec(d, 0.0);
    layer.b_value = vec(d, 0.0);
    layer.b_out = vec(d, 0.0);
    layer.ln_mlp = rng ? identity_norm(d) : zero_norm(d);
    layer.w_hidden = mat(d, hidden, sd_d);
    layer.b_hidden = vec(hidden, 0.0);
    layer.w_proj = mat(hidden, d, 0.5 * sd_h);
    layer.b_proj = vec(d, 0.0);
  }
  w.ln_final = rng ? identity_norm(d) : zero_norm(d);
  return w;
}

template <typename Weights, typename Fn>
void visit_tensors(Weights& w, Fn&& fn) {
  fn(w.input_proj.data);
  fn(w.input_bias);
  fn(w.position.data);
  fn(w.class_token);
  for (auto& layer : w.layers) {
    fn(layer.ln_attn.gain);
    fn(layer.ln_attn.bias);
    fn(layer.w_query.data);
    fn(layer.w_key.data);
    fn(layer.w_value.data);
    fn(layer.w_out.data);
    fn(layer.b_query);
    fn(layer.b_key);
    fn(layer.b_value);
    fn(layer.b_out);
    fn(layer.ln_mlp.gain);
    fn(layer.ln_mlp.bias);
    fn(layer.w_hidden.data);
    fn(layer.b_hidden);
    fn(layer.w_proj.data);
    fn(layer.b_proj);
  }
  fn(w.ln_final.gain);
  fn(w.ln_final.bias);
}

PromptGrads run_backward(const Backbone& backbone, const ForwardTrace& trace, const PromptSet* prompts,
                         std::span<const double> grad_embedding, BackboneWeights* grads) {
  const auto& cfg = backbone.config();
  const auto& w = backbone.weights();
  const std::size_t d = cfg.embed_dim;
  require(trace.valid && trace.layers.size() == cfg.num_layers, ErrorKind::TraceError,
          "trace was not produced by a traced encode of this backbone");
  const std::uint64_t fp = prompts ? prompts->fingerprint() : 0;
  require(trace.prompt_fingerprint == fp, ErrorKind::TraceError, "trace does not match the prompt set");
  require(grad_embedding.size() == d, ErrorKind::ShapeError, "gradient width mismatch");

  // Final layer norm on the class token.
  Matrix dy(1, d);
  std::copy(grad_embedding.begin(), grad_embedding.end(), dy.data.begin());
  Matrix xhat(1, d);
  std::copy(trace.final_xhat.begin(), trace.final_xhat.end(), xhat.data.begin());
  Matrix dclass(1, d);
  layer_norm_backward_rows(dy, xhat, Vector{trace.final_rstd}, w.ln_final, dclass, grads ? &grads->ln_final : nullptr);

  PromptGrads prompt_grads(cfg.num_layers);
  Matrix dtokens(cfg.seq_len, d);
  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const LayerTrace& lt = trace.layers[li];
    const std::size_t lp = lt.input.rows - 1 - cfg.seq_len;
    Matrix dout(lt.input.rows, d);
    std::copy(dclass.data.begin(), dclass.data.end(), dout.row(0).begin());
    for (std::size_t r = 0; r < cfg.seq_len; ++r) {
      std::copy(dtokens.row(r).begin(), dtokens.row(r).end(), dout.row(1 + lp + r).begin());
    }
    Matrix dx = block_backward(cfg, w.layers[li], lt, dout, grads ? &grads->layers[li] : nullptr);
    prompt_grads[li] = Matrix(lp, d);
    for (std::size_t r = 0; r < lp; ++r) {
      std::copy(dx.row(1 + r).begin(), dx.row(1 + r).end(), prompt_grads[li].row(r).begin());
    }
    std::copy(dx.row(0).begin(), dx.row(0).end(), dclass.data.begin());
    for (std::size_t r = 0; r < cfg.seq_len; ++r) {
      std::copy(dx.row(1 + lp + r).begin(), dx.row(1 + lp + r).end(), dtokens.row(r).begin());
    }
  }

  if (grads) {
    axpy(1.0, dclass.data, grads->class_token);
    accumulate_column_sums(dtokens, grads->input_bias);
    axpy(1.0, dtokens.data, grads->position.data);
    matmul_at_b_acc(trace.raw_tokens, dtokens, grads->input_proj);
  }
  return prompt_grads;
}

}  // namespace

void BackboneConfig::validate() const {
  require(num_layers > 0 && embed_dim > 0 && num_heads > 0 && seq_len > 0 && mlp_hidden > 0,
          ErrorKind::ConfigError, "backbone dimensions must be positive");
  require(embed_dim % num_heads == 0, ErrorKind::ConfigError,
          "num_heads (" + std::to_string(num_heads) + ") must divide embed_dim (" + std::to_string(embed_dim) + ")");
}

void BackboneWeights::for_each_tensor(const std::function<void(std::span<double>)>& fn) {
  visit_tensors(*this, [&](auto& t) { fn(std::span<double>(t)); });
}

void BackboneWeights::for_each_tensor(const std::function<void(std::span<const double>)>& fn) const {
  visit_tensors(*this, [&](const auto& t) { fn(std::span<const double>(t)); });
}

std::size_t BackboneWeights::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](std::span<const double> t) { n += t.size(); });
  return n;
}

std::size_t PromptSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& m : layers) n += m.size();
  return n;
}

std::uint64_t PromptSet::fingerprint() const {
  std::uint64_t h = binio::fnv1a(std::as_bytes(std::span(&task_id, 1)));
  for (const auto& m : layers) {
    const std::uint64_t shape[2] = {m.rows, m.cols};
    h = binio::fnv1a(std::as_bytes(std::span(shape)), h);
    h = binio::fnv1a(m.data, h);
  }
  return h;
}

BackboneWeights& Backbone::mutable_weights() {
  require(!frozen_, ErrorKind::FrozenError, "backbone is frozen");
  return weights_;
}

void Backbone::reinitialize(std::uint64_t seed) {
  require(!frozen_, ErrorKind::FrozenError, "cannot re-initialize a frozen backbone");
  *this = init_backbone(config_, seed);
}

std::uint64_t Backbone::checksum() const {
  const std::uint32_t dims[5] = {config_.num_layers, config_.embed_dim, config_.num_heads, config_.seq_len,
                                 config_.mlp_hidden};
  std::uint64_t h = binio::fnv1a(std::as_bytes(std::span(dims)));
  weights_.for_each_tensor([&](std::span<const double> t) { h = binio::fnv1a(t, h); });
  return h;
}

bool operator==(const Backbone& a, const Backbone& b) {
  return a.config_ == b.config_ && a.frozen_ == b.frozen_ && a.checksum() == b.checksum();
}

void Backbone::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), ErrorKind::MissingFile, "cannot open " + path.string() + " for writing");
  binio::write_magic(os, "CPPB");
  binio::write_u32(os, kBackboneVersion);
  binio::write_u32(os, config_.num_layers);
  binio::write_u32(os, config_.embed_dim);
  binio::write_u32(os, config_.num_heads);
  binio::write_u32(os, config_.seq_len);
  binio::write_u32(os, config_.mlp_hidden);
  binio::write_u32(os, frozen_ ? 1u : 0u);
  weights_.for_each_tensor([&](std::span<const double> t) { binio::write_f64s(os, t); });
  require(os.good(), ErrorKind::FormatError, "write failed for " + path.string());
}

Backbone Backbone::load(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::MissingFile, "no such file: " + path.string());
  std::ifstream is(path, std::ios::binary);
  binio::expect_magic(is, "CPPB");
  const auto version = binio::read_u32(is);
  require(version == kBackboneVersion, ErrorKind::FormatError, "unsupported backbone version");
  BackboneConfig cfg;
  cfg.num_layers = binio::read_u32(is);
  cfg.embed_dim = binio::read_u32(is);
  cfg.num_heads = binio::read_u32(is);
  cfg.seq_len = binio::read_u32(is);
  cfg.mlp_hidden = binio::read_u32(is);
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorKind::FormatError, std::string("corrupt backbone config: ") + e.what());
  }
  require(cfg.num_layers <= 64 && cfg.embed_dim <= 4096 && cfg.seq_len <= 4096 && cfg.mlp_hidden <= 65536,
          ErrorKind::FormatError, "backbone config out of range");
  const auto frozen_flag = binio::read_u32(is);
  require(frozen_flag <= 1, ErrorKind::FormatError, "bad frozen flag");

  Backbone b;
  b.config_ = cfg;
  b.weights_ = zero_weights(cfg);
  b.weights_.for_each_tensor([&](std::span<double> t) { binio::read_f64s(is, t); });
  require(is.peek() == std::char_traits<char>::eof(), ErrorKind::FormatError, "trailing bytes in backbone file");
  b.weights_.for_each_tensor([&](std::span<const double> t) {
    require(all_finite(t), ErrorKind::FormatError, "non-finite weight in backbone file");
  });
  b.frozen_ = frozen_flag == 1;
  return b;
}

Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng(seed).split(0xBAC0);
  Backbone b;
  b.config_ = config;
  b.weights_ = make_weights(config, &rng);
  return b;
}

BackboneWeights zero_weights(const BackboneConfig& config) {
  config.validate();
  return make_weights(config, nullptr);
}

PromptSet init_prompts(const BackboneConfig& config, std::size_t prompt_length, std::int32_t task_id, Rng& rng) {
  config.validate();
  PromptSet p;
  p.task_id = task_id;
  p.layers.reserve(config.num_layers);
  for (std::uint32_t i = 0; i < config.num_layers; ++i) {
    Matrix m(prompt_length, config.embed_dim);
    for (double& v : m.data) v = rng.uniform(-0.05, 0.05);
    p.layers.push_back(std::move(m));
  }
  return p;
}

PromptSet empty_prompts(const BackboneConfig& config, std::int32_t task_id) {
  PromptSet p;
  p.task_id = task_id;
  p.layers.assign(config.num_layers, Matrix(0, config.embed_dim));
  return p;
}

LayerOutput layer_forward(const BackboneConfig& config, const LayerWeights& layer,
                          std::span<const double> class_token, const Matrix& prompt, const Matrix& tokens) {
  config.validate();
  require(class_token.size() == config.embed_dim && tokens.cols == config.embed_dim &&
              (prompt.rows == 0 || prompt.cols == config.embed_dim),
          ErrorKind::ShapeError, "layer_forward: width mismatch");
  LayerTrace t;
  const Matrix out = block_forward(config, layer, assemble_sequence(class_token, prompt, tokens), t);
  LayerOutput result;
  result.class_token.assign(out.row(0).begin(), out.row(0).end());
  result.tokens = Matrix(tokens.rows, config.embed_dim);
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    const auto src = out.row(1 + prompt.rows + r);
    std::copy(src.begin(), src.end(), result.tokens.row(r).begin());
  }
  return result;
}

Vector encode(const Backbone& backbone, const TokenSequence& x, const PromptSet* prompts, ForwardTrace* trace) {
  const auto& cfg = backbone.config();
  const auto& w = backbone.weights();
  const std::size_t d = cfg.embed_dim;
  check_tokens(cfg, x);
  if (prompts) check_prompts(cfg, *prompts);

  Matrix tokens;
  matmul(x, w.input_proj, tokens);
  add_row_bias(tokens, w.input_bias);
  for (std::size_t i = 0; i < tokens.data.size(); ++i) tokens.data[i] += w.position.data[i];
  Vector cls = w.class_token;

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  if (trace) tr.raw_tokens = x;
  tr.layers.resize(cfg.num_layers);
  for (std::size_t li = 0; li < cfg.num_layers; ++li) {
    const Matrix& prompt = prompts ? prompts->layers[li] : empty_block();
    const Matrix seq = assemble_sequence(cls, prompt, tokens);
    LayerTrace& lt = tr.layers[li];
    const Matrix out = block_forward(cfg, w.layers[li], seq, lt);
    std::copy(out.row(0).begin(), out.row(0).end(), cls.begin());
    for (std::size_t r = 0; r < cfg.seq_len; ++r) {
      const auto src = out.row(1 + prompt.rows + r);
      std::copy(src.begin(), src.end(), tokens.row(r).begin());
    }
    if (!trace) lt = LayerTrace{};
  }

  Matrix cls_m(1, d), y, xhat;
  Vector rstd;
  std::copy(cls.begin(), cls.end(), cls_m.data.begin());
  layer_norm_rows(cls_m, w.ln_final, y, xhat, rstd);
  if (trace) {
    tr.final_class = cls;
    tr.final_xhat = xhat.data;
    tr.final_rstd = rstd[0];
    tr.prompt_fingerprint = prompts ? prompts->fingerprint() : 0;
    tr.prompt_length = prompts ? prompts->length() : 0;
    tr.valid = true;
  }
  return y.data;
}

PromptGrads backward_to_prompts(const Backbone& backbone, const ForwardTrace& trace, const PromptSet& prompts,
                                std::span<const double> grad_embedding) {
  check_prompts(backbone.config(), prompts);
  return run_backward(backbone, trace, &prompts, grad_embedding, nullptr);
}

void backward_to_weights(const Backbone& backbone, const ForwardTrace& trace, const PromptSet* prompts,
                         std::span<const double> grad_embedding, BackboneWeights& grads) {
  require(!backbone.frozen(), ErrorKind::FrozenError, "weight gradients requested for a frozen backbone");
  run_backward(backbone, trace, prompts, grad_embedding, &grads);
}

}  // namespace protoprompt
