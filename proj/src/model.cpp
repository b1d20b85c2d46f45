#include "smap/model.h"

#include <cmath>
#include <random>
#include <string>

namespace smap {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("model config: " + what);
}

void check_matrix(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(name + ": expected " + shape_string(rows, cols) + ", got " +
                     m.shape_string());
  }
  if (!all_finite(m.data())) throw std::domain_error(name + ": non-finite entry");
}

void check_vector(const Vector& v, std::size_t dim, const std::string& name) {
  if (v.size() != dim) {
    throw ShapeError(name + ": expected [" + std::to_string(dim) + "], got [" +
                     std::to_string(v.size()) + "]");
  }
  if (!all_finite(v)) throw std::domain_error(name + ": non-finite entry");
}

// Uniform in [-scale, scale) from the top 53 bits of a 64-bit Mersenne
// Twister draw. The engine's output sequence is fixed by the standard, so this
// is reproducible across standard libraries.
class UniformSource {
 public:
  explicit UniformSource(std::uint64_t seed) : engine_(seed) {}

  float next(float scale) {
    const double unit = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return static_cast<float>((2.0 * unit - 1.0) * scale);
  }

  Matrix matrix(std::size_t rows, std::size_t cols, float scale) {
    Matrix m(rows, cols);
    for (float& x : m.data()) x = next(scale);
    return m;
  }

 private:
  std::mt19937_64 engine_;
};

float fan_in_scale(std::size_t fan_in) {
  return static_cast<float>(std::sqrt(3.0 / static_cast<double>(fan_in)));
}

void apply_rotary(std::span<float> head, std::size_t pos, float theta) {
  const std::size_t half = head.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::pow(static_cast<double>(theta), -2.0 * static_cast<double>(i) / head.size());
    const double angle = static_cast<double>(pos) * freq;
    const double c = std::cos(angle), s = std::sin(angle);
    const double x0 = head[i], x1 = head[i + half];
    head[i] = static_cast<float>(x0 * c - x1 * s);
    head[i + half] = static_cast<float>(x0 * s + x1 * c);
  }
}

float silu(float x) { return static_cast<float>(x / (1.0 + std::exp(-static_cast<double>(x)))); }

}  // namespace

void ModelConfig::validate() const {
  require(vocab_size > 0, "vocab_size must be positive");
  require(d_model > 0, "d_model must be positive");
  require(n_layers > 0, "n_layers must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(d_ff > 0, "d_ff must be positive");
  require(max_seq_len > 0, "max_seq_len must be positive");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(head_dim() % 2 == 0, "head dimension must be even for rotary encoding");
  require(std::isfinite(norm_eps) && norm_eps > 0.0f, "norm_eps must be positive");
  require(std::isfinite(rope_theta) && rope_theta > 0.0f, "rope_theta must be positive");
}

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 256;
  c.d_model = 64;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_ff = 128;
  c.max_seq_len = 64;
  return c;
}

void ModelWeights::validate() const {
  config.validate();
  const auto& c = config;
  check_matrix(token_embedding, c.vocab_size, c.d_model, "tok_embeddings");
  if (layers.size() != c.n_layers) {
    throw ShapeError("expected " + std::to_string(c.n_layers) + " layers, got " +
                     std::to_string(layers.size()));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    check_vector(w.attn_norm, c.d_model, p + "attn_norm");
    check_matrix(w.attn_q, c.d_model, c.d_model, p + "attn_q");
    check_matrix(w.attn_k, c.d_model, c.d_model, p + "attn_k");
    check_matrix(w.attn_v, c.d_model, c.d_model, p + "attn_v");
    check_matrix(w.attn_o, c.d_model, c.d_model, p + "attn_o");
    check_vector(w.ffn_norm, c.d_model, p + "ffn_norm");
    check_matrix(w.ffn_gate, c.d_ff, c.d_model, p + "ffn_gate");
    check_matrix(w.ffn_up, c.d_ff, c.d_model, p + "ffn_up");
    check_matrix(w.ffn_down, c.d_model, c.d_ff, p + "ffn_down");
  }
  check_vector(final_norm, c.d_model, "final_norm");
  if (!c.tied_embeddings) check_matrix(unembedding, c.vocab_size, c.d_model, "output");
}

ModelWeights make_random_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  UniformSource rng(seed);
  ModelWeights w;
  w.config = config;
  const std::size_t d = config.d_model;
  w.token_embedding = rng.matrix(config.vocab_size, d, 1.0f);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = Vector(d, 1.0f);
    lw.attn_q = rng.matrix(d, d, fan_in_scale(d));
    lw.attn_k = rng.matrix(d, d, fan_in_scale(d));
    lw.attn_v = rng.matrix(d, d, fan_in_scale(d));
    lw.attn_o = rng.matrix(d, d, fan_in_scale(d));
    lw.ffn_norm = Vector(d, 1.0f);
    lw.ffn_gate = rng.matrix(config.d_ff, d, fan_in_scale(d));
    lw.ffn_up = rng.matrix(config.d_ff, d, fan_in_scale(d));
    lw.ffn_down = rng.matrix(d, config.d_ff, fan_in_scale(config.d_ff));
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = Vector(d, 1.0f);
  if (!config.tied_embeddings) w.unembedding = rng.matrix(config.vocab_size, d, fan_in_scale(d));
  return w;
}

Vector embed(const ModelWeights& weights, TokenId token) {
  if (token >= weights.config.vocab_size) {
    throw IndexError("token id " + std::to_string(token) + " out of range for vocabulary of " +
                     std::to_string(weights.config.vocab_size));
  }
  const auto row = weights.token_embedding.row(token);
  return Vector(row.begin(), row.end());
}

std::vector<Vector> run_block(const ModelWeights& weights, std::size_t layer,
                              std::span<const Vector> inputs, LayerCache& cache) {
  const ModelConfig& c = weights.config;
  const LayerWeights& w = weights.layers.at(layer);
  const std::size_t hd = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Vector> outputs;
  outputs.reserve(inputs.size());
  for (const Vector& x : inputs) {
    const std::size_t pos = cache.keys.size();
    const Vector xn = rms_normalize(x, w.attn_norm, c.norm_eps);
    Vector q = matvec(w.attn_q, xn);
    Vector k = matvec(w.attn_k, xn);
    Vector v = matvec(w.attn_v, xn);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      apply_rotary(std::span<float>(q).subspan(h * hd, hd), pos, c.rope_theta);
      apply_rotary(std::span<float>(k).subspan(h * hd, hd), pos, c.rope_theta);
    }
    cache.keys.push_back(std::move(k));
    cache.values.push_back(std::move(v));

    Vector attended(c.d_model, 0.0f);
    std::vector<double> scores(pos + 1);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t p = 0; p <= pos; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < hd; ++i) {
          dot += static_cast<double>(q[off + i]) * cache.keys[p][off + i];
        }
        scores[p] = dot * scale;
      }
      const auto probs = softmax(std::span<const double>(scores));
      for (std::size_t i = 0; i < hd; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p <= pos; ++p) acc += probs[p] * cache.values[p][off + i];
        attended[off + i] = static_cast<float>(acc);
      }
    }

    Vector hidden = x;
    const Vector attn_out = matvec(w.attn_o, attended);
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] += attn_out[i];

    const Vector hn = rms_normalize(hidden, w.ffn_norm, c.norm_eps);
    Vector gate = matvec(w.ffn_gate, hn);
    const Vector up = matvec(w.ffn_up, hn);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = silu(gate[i]) * up[i];
    const Vector ffn_out = matvec(w.ffn_down, gate);
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] += ffn_out[i];

    outputs.push_back(std::move(hidden));
  }
  return outputs;
}

ForwardResult forward_full(std::span<const TokenId> tokens, const ModelWeights& weights,
                           const LayerHook& hook, KvCache* cache_out) {
  const ModelConfig& c = weights.config;
  if (tokens.empty()) throw std::invalid_argument("forward_full: empty token sequence");
  if (tokens.size() > c.max_seq_len) {
    throw ContextOverflowError("sequence of " + std::to_string(tokens.size()) +
                               " tokens exceeds context of " + std::to_string(c.max_seq_len));
  }

  std::vector<Vector> current;
  current.reserve(tokens.size());
  for (TokenId t : tokens) current.push_back(embed(weights, t));

  KvCache cache(c.n_layers);
  ForwardResult result{SemanticMap(c.d_model), {}};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::vector<Vector> out = run_block(weights, l, current, cache.layers[l]);
    result.hidden_states.append_layer(out);
    if (hook) {
      std::vector<Vector> replaced = hook(l, out, result.hidden_states);
      if (replaced.size() != out.size()) {
        throw ShapeError("layer hook returned " + std::to_string(replaced.size()) +
                         " states for " + std::to_string(out.size()) + " positions");
      }
      result.hidden_states.replace_layer(l, replaced);
      out = std::move(replaced);
    }
    current = std::move(out);
  }

  result.logits.reserve(current.size());
  for (const Vector& h : current) result.logits.push_back(project_logits(h, weights));
  if (cache_out) *cache_out = std::move(cache);
  return result;
}

Vector project_logits(std::span<const float> h, const ModelWeights& weights) {
  if (h.size() != weights.config.d_model) {
    throw ShapeError("project_logits: state of dim " + std::to_string(h.size()) +
                     " for d_model " + std::to_string(weights.config.d_model));
  }
  return matvec(weights.output_head(), rms_normalize(h, weights.final_norm, weights.config.norm_eps));
}

TokenId greedy_next(std::span<const float> logits) {
  return static_cast<TokenId>(argmax(logits));
}

}  // namespace smap
