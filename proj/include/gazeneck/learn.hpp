#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

// Small CPU neural-network stack: float32 tensors with reverse-mode autodiff,
// GELU MLP / conv blocks, losses, Adam, gradient checking and checkpoints.
namespace gazeneck::learn {

using Shape = std::vector<int>;
// Fixed alignment keeps Eigen's vectorised reductions splitting the data the
// same way every time, so results do not depend on where malloc put a buffer.
using Buffer = std::vector<float, Eigen::aligned_allocator<float>>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  Buffer& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    return grad;
  }
};

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Handle to a graph node. Copies share storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor from(const Shape& shape, const std::vector<float>& values, bool requires_grad = false);
  static Tensor from(const Shape& shape, Buffer values, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::initializer_list<float> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  float* data() { return node_->value.data(); }
  const float* data() const { return node_->value.data(); }
  Buffer& values() { return node_->value; }
  const Buffer& values() const { return node_->value; }
  // Gradient buffer, allocated (zeroed) on first access.
  Buffer& grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0f); }
  float item() const;
  // Same values, cut from the graph.
  Tensor detach() const;
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph construction in its scope (inference).
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// Seeds d(loss)/d(loss) = 1 and runs the graph backwards. loss must hold one element.
void backward(const Tensor& loss);

// ---- ops (throw ShapeMismatch on inconsistent shapes) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
// 2-D only: [N, a] ++ [N, b] ++ ... along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int begin, int count);
// x [N, in], w [out, in], b [out] -> [N, out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// x [N, C, H, W], w [O, C*k*k], b [O] -> [N, O, Ho, Wo], Ho = (H + 2p - k)/s + 1
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int k, int stride, int pad);
// a [B, M, K] x b [B, K, N] -> [B, M, N]. With trans_b, b is [B, N, K].
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);
// Softmax over the last dimension, any rank >= 1.
Tensor softmax(const Tensor& a);

// ---- losses ----
Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// logits [N, K]; mean softmax cross-entropy. Throws IndexOutOfRange.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
// mu, logvar [N, D] (or [D]); batch mean of 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
Tensor kl_loss(const Tensor& mu, const Tensor& logvar);

// ---- blocks ----
using Rng = std::mt19937_64;

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(int in, int out, Rng& rng);
  int in() const { return w.dim(1); }
  int out() const { return w.dim(0); }
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  std::vector<Tensor> params() const { return {w, b}; }
};

struct Conv2d {
  Tensor w, b;
  int k = 3, stride = 2, pad = 1;
  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride, int pad, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, k, stride, pad); }
  std::vector<Tensor> params() const { return {w, b}; }
};

// Linear layers with GELU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;
  Mlp() = default;
  Mlp(const std::vector<int>& widths, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> params() const;
};

// Three stride-2 3x3 convs (GELU) then flatten -> linear -> GELU.
struct ConvEncoder {
  int channels = 0, height = 0, width = 0, feature = 128;
  std::vector<int> widths;  // conv output channels
  Conv2d c1, c2, c3;
  Linear fc;
  ConvEncoder() = default;
  ConvEncoder(int channels, int height, int width, std::vector<int> widths, int feature, Rng& rng);
  Tensor operator()(const Tensor& x) const;  // [N, C, H, W] -> [N, feature]
  std::vector<Tensor> params() const;
  nlohmann::json arch() const;
};

// Single-head self-attention over k tokens of width dim, then a GELU
// feed-forward; both residual.
struct AttentionLayer {
  int dim = 64;
  Linear q, k, v, o;
  Mlp ff;
  AttentionLayer() = default;
  AttentionLayer(int dim, Rng& rng);
  Tensor operator()(const Tensor& h, int tokens) const;  // h [N*tokens, dim]
  std::vector<Tensor> params() const;
};

enum class DecoderKind { Mlp, Attention };
const char* to_string(DecoderKind k);
DecoderKind parse_decoder_kind(const std::string& s);  // "mlp" | "attention"; throws ConfigError

// Emits K x D values per sample as [N, K*D]. Mlp: hidden x layers GELU MLP.
// Attention: the input is projected to K tokens of width attention_dim (the
// projection bias doubles as a position code), two AttentionLayers, then a
// per-token linear readout; hidden and layers are ignored.
struct ChunkDecoder {
  int k = 0, d = 0;
  DecoderKind kind = DecoderKind::Mlp;
  Mlp mlp;
  int dim = 0;
  Linear embed, readout;
  std::vector<AttentionLayer> attn;
  ChunkDecoder() = default;
  ChunkDecoder(int in, int hidden, int layers, int k, int d, Rng& rng, DecoderKind kind = DecoderKind::Mlp,
               int attention_dim = 64);
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> params() const;
};

// CVAE encoder: input -> (mu, logvar), each [N, latent].
struct CvaeHeads {
  int latent = 32;
  Mlp encoder;
  CvaeHeads() = default;
  CvaeHeads(int in, int hidden, int latent, Rng& rng);
  std::pair<Tensor, Tensor> encode(const Tensor& x) const;
  // z = mu + exp(logvar / 2) * eps with eps ~ N(0, 1).
  static Tensor sample(const Tensor& mu, const Tensor& logvar, Rng& rng);
  std::vector<Tensor> params() const { return encoder.params(); }
};

// ---- optimisation ----
struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// One bias-corrected Adam update of n values at step t (t >= 1).
void adam_update(float* p, const float* g, float* m, float* v, std::size_t n, int t, const AdamConfig& c);

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});
  void zero_grad();
  void step();
  int steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamConfig cfg_;
  int t_ = 0;
};

// Worst norm-wise relative error between backprop gradients and central
// differences of f() with step h, over every tensor in wrt.
double gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt, double h = 1e-3);

// ---- checkpoints ----
// File: "GZNK" magic, u32 version, u64 header length, header JSON, then the
// float32 parameter buffers in declaration order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const nlohmann::json& header, const std::vector<Tensor>& params);
// Throws MissingCheckpoint, FormatError.
nlohmann::json read_checkpoint_header(const std::string& path);
// Fills params in place. Throws ModelMismatch when shapes disagree.
nlohmann::json load_checkpoint(const std::string& path, const std::vector<Tensor>& params);

}  // namespace gazeneck::learn
