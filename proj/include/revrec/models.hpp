#pragma once

// Rating predictors (bias-only, MF, HFT, NeuMF, DeepCoNN/DeepCoNN++, NARRE)
// and the shared mini-batch trainer.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "revrec/autodiff.hpp"
#include "revrec/corpus.hpp"
#include "revrec/text.hpp"

namespace revrec {

enum class ModelKind { Bias, MF, HFT, NeuMF, DeepCoNN, DeepCoNNPlus, NARRE };

std::string_view to_string(ModelKind kind);
/// Accepts the names printed by to_string ("bias", "mf", "hft", "neumf",
/// "deepconn", "deepconn++", "narre"). Throws ConfigError otherwise.
ModelKind parse_model_kind(std::string_view name);
std::span<const ModelKind> all_model_kinds();

bool uses_text(ModelKind kind);
bool uses_latent_dim(ModelKind kind);
bool uses_dropout(ModelKind kind);
/// Document layout the model reads, if any.
std::optional<DocLayout> document_layout(ModelKind kind);

struct TrainConfig {
  std::size_t latent_dim = 8;
  double l2 = 1e-6;
  double dropout = 0.4;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
  // HFT
  double hft_mu = 0.1;
  std::size_t hft_resample_period = 1;
  // TextCNN encoders (DeepCoNN, NARRE)
  std::size_t cnn_filters = 100;
  std::size_t cnn_width = 3;
  std::size_t attention_dim = 32;
  bool finetune_embeddings = false;

  /// Throws ConfigError for values outside their legal range.
  void validate() const;
};

/// Compact JSON object with every TrainConfig field.
std::string to_json(const TrainConfig& config);
/// Inverse of to_json; throws DataError on malformed input.
TrainConfig train_config_from_json(std::string_view json);

struct UserItem {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
};

/// Immutable data a model is built against. `text` may be null for models
/// that ignore reviews.
struct ModelContext {
  std::shared_ptr<const SplitDataset> split;
  std::shared_ptr<const TextArtifacts> text;

  const Dataset& dataset() const { return split->dataset(); }
};

// Learned parameter groups. Tensors are shared handles, so tests and
// checkpoint loading may overwrite values in place.

struct BiasParams {
  ad::Tensor alpha;      // (1)
  ad::Tensor user_bias;  // (|U|, 1)
  ad::Tensor item_bias;  // (|I|, 1)
};

struct MfParams {
  BiasParams bias;
  ad::Tensor user_factors;  // (|U|, K)
  ad::Tensor item_factors;  // (|I|, K)
};

struct HftParams {
  MfParams mf;
  ad::Tensor word_topic;  // psi (K, |V|); phi_k = softmax(psi_k)
  ad::Tensor kappa;       // (1); theta_i = softmax(kappa * gamma_i)
};

/// F(gamma_u, gamma_i): a GMF branch (elementwise product) and an MLP branch
/// [2K -> K -> max(1, K/2)], joined by one linear output layer.
struct NeuMfParams {
  MfParams mf;
  ad::Tensor mlp_w1, mlp_b1;  // (2K, K), (K)
  ad::Tensor mlp_w2, mlp_b2;  // (K, K2), (K2)
  ad::Tensor out_w, out_b;    // (K + K2, 1), (1)
};

/// TextCNN encoder: conv (width*d, F) -> relu -> max-over-time.
struct ConvEncoder {
  ad::Tensor filters;
  ad::Tensor bias;
};

struct DeepConnTower {
  ConvEncoder conv;
  ad::Tensor proj_w;  // (F, K)
  ad::Tensor proj_b;  // (K)
};

struct DeepConnParams {
  DeepConnTower user_tower;
  DeepConnTower item_tower;
  ad::Tensor reg_w;  // (2K, 1)
  ad::Tensor reg_b;  // (1)
  std::optional<BiasParams> bias;  // DeepCoNN++ only
};

struct NarreSide {
  ConvEncoder conv;
  ad::Tensor att_review;  // (F, A)
  ad::Tensor att_id;      // (K, A)
  ad::Tensor att_bias;    // (A)
  ad::Tensor att_score;   // (A, 1)
  ad::Tensor proj_w;      // (F, K)
  ad::Tensor proj_b;      // (K)
  ad::Tensor key_table;   // counterpart id embeddings, (|I| or |U|, K)
};

struct NarreParams {
  MfParams mf;  // biases plus the id embeddings q_u, p_i
  NarreSide user_side;
  NarreSide item_side;
  ad::Tensor out_w;  // (K, 1)
  ad::Tensor out_b;  // (1)
};

// Closed-form single predictions used as independent cross-checks.
double predict_bias(const BiasParams& p, std::uint32_t user, std::uint32_t item);
double predict_mf(const MfParams& p, std::uint32_t user, std::uint32_t item);

class Model {
 public:
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ModelKind kind() const { return kind_; }
  const TrainConfig& config() const { return config_; }
  const ModelContext& context() const { return context_; }

  /// Raw predictions (B) for a batch, recorded on `tape`.
  virtual ad::Tensor forward(ad::Tape& tape, std::span<const UserItem> batch) = 0;

  /// Training objective over training-partition rows. Default: mean squared
  /// error of forward() against the ratings.
  virtual ad::Tensor loss(ad::Tape& tape, std::span<const std::size_t> rows);

  /// Hook run after every training epoch (HFT topic resampling).
  virtual void end_epoch(std::size_t epoch);

  /// Every learned tensor, by stable name.
  const ad::NamedTensors& parameters() const { return params_; }
  /// Whether L2 weight decay applies to the named parameter.
  virtual bool decays(const std::string& name) const;

  /// Evaluation-mode predictions, unclipped. Pairs whose user or item had no
  /// training interaction fall back to alpha plus whichever bias exists.
  std::vector<double> predict(std::span<const UserItem> pairs, std::size_t batch = 512);

  /// Biases, when the model has them.
  virtual const BiasParams* bias_params() const { return nullptr; }

  bool seen_user(std::uint32_t u) const { return u < seen_users_.size() && seen_users_[u]; }
  bool seen_item(std::uint32_t i) const { return i < seen_items_.size() && seen_items_[i]; }

  /// Overwrites parameter values from a checkpoint; names and shapes must match.
  void load_state(const std::map<std::string, ad::Tensor>& state);

 protected:
  Model(ModelKind kind, ModelContext context, TrainConfig config);

  /// Registers a parameter initialised uniformly in +-sqrt(6/(fan_in+fan_out))
  /// (first two extents) or zero.
  ad::Tensor add_param(const std::string& name, ad::Shape shape, bool zero_init = false);
  void register_param(const std::string& name, ad::Tensor t);
  BiasParams make_bias_params();
  MfParams make_mf_params();
  ConvEncoder make_encoder(const std::string& prefix, std::size_t embedding_dim);

  /// alpha + beta_u + beta_i, shape (B).
  static ad::Tensor bias_terms(ad::Tape& tape, const BiasParams& p, std::span<const UserItem> batch);

  Rng& init_rng() { return init_rng_; }

 private:
  ModelKind kind_;
  ModelContext context_;
  TrainConfig config_;
  ad::NamedTensors params_;
  Rng init_rng_;
  std::vector<char> seen_users_;
  std::vector<char> seen_items_;
};

class BiasModel final : public Model {
 public:
  BiasModel(ModelContext context, TrainConfig config);
  ad::Tensor forward(ad::Tape& tape, std::span<const UserItem> batch) override;
  const BiasParams* bias_params() const override { return &p_; }
  BiasParams& params() { return p_; }

 private:
  BiasParams p_;
};

class MfModel : public Model {
 public:
  MfModel(ModelContext context, TrainConfig config);
  ad::Tensor forward(ad::Tape& tape, std::span<const UserItem> batch) override;
  const BiasParams* bias_params() const override { return &p_.bias; }
  MfParams& params() { return p_; }

 protected:
  MfModel(ModelKind kind, ModelContext context, TrainConfig config);

 private:
  MfParams p_;
};

/// MF whose item factors also explain review words through an LDA-style
/// likelihood. Topic assignments are resampled between gradient epochs.
class HftModel final : public MfModel {
 public:
  HftModel(ModelContext context, TrainConfig config);

  /// Squared error minus mu times the corpus log-likelihood of the rows'
  /// reviews at the current topic assignments, both averaged over the rows.
  ad::Tensor loss(ad::Tape& tape, std::span<const std::size_t> rows) override;
  void end_epoch(std::size_t epoch) override;

  /// Draws every training token's topic proportional to theta_{i,k} phi_{k,w}.
  void resample(std::uint64_t seed);

  /// Log-likelihood term alone (no mu), summed over `rows`.
  double log_likelihood(std::span<const std::size_t> rows);
  /// Full objective over `rows` without recording gradients.
  double objective(std::span<const std::size_t> rows);

  /// phi as a (K, |V|) row-stochastic matrix.
  std::vector<double> topic_word_distribution() const;
  /// theta_i (K).
  std::vector<double> item_topic_distribution(std::uint32_t item) const;
  /// Topic assignments of the tokens of a training row.
  std::span<const std::uint32_t> assignments(std::size_t row) const;

  HftParams& hft_params() { return h_; }
  std::size_t num_topics() const { return config().latent_dim; }

 private:
  ad::Tensor likelihood(ad::Tape& tape, std::span<const std::size_t> rows);

  HftParams h_;
  std::vector<std::int64_t> offsets_;  // per dataset row, -1 when not training
  std::vector<std::uint32_t> topics_;
  std::size_t rounds_ = 0;
};

class NeuMfModel final : public Model {
 public:
  NeuMfModel(ModelContext context, TrainConfig config);
  ad::Tensor forward(ad::Tape& tape, std::span<const UserItem> batch) override;
  const BiasParams* bias_params() const override { return &p_.mf.bias; }
  NeuMfParams& params() { return p_; }
  std::size_t hidden2() const { return p_.mlp_w2.dim(1); }

 private:
  NeuMfParams p_;
};

/// Word embedding table shared by the text models: frozen by default, a
/// trainable per-model copy when finetuning.
class TextModelBase : public Model {
 protected:
  TextModelBase(ModelKind kind, ModelContext context, TrainConfig config);
  /// Encodes one padded sequence of which the first `length` ids are real.
  ad::Tensor encode(ad::Tape& tape, const ConvEncoder& enc, std::span<const TokenId> seq,
                    std::uint32_t length);
  const ad::Tensor& embeddings() const { return embeddings_; }
  std::size_t embedding_dim() const { return embeddings_.dim(1); }

 private:
  ad::Tensor embeddings_;
};

class DeepConnModel final : public TextModelBase {
 public:
  /// kind must be DeepCoNN or DeepCoNNPlus.
  DeepConnModel(ModelKind kind, ModelContext context, TrainConfig config);
  ad::Tensor forward(ad::Tape& tape, std::span<const UserItem> batch) override;
  const BiasParams* bias_params() const override { return p_.bias ? &*p_.bias : nullptr; }
  DeepConnParams& params() { return p_; }

 private:
  ad::Tensor tower(ad::Tape& tape, const DeepConnTower& t, const EntityDocs& docs,
                   std::span<const std::uint32_t> ids);
  DeepConnParams p_;
};

class NarreModel final : public TextModelBase {
 public:
  NarreModel(ModelContext context, TrainConfig config);
  ad::Tensor forward(ad::Tape& tape, std::span<const UserItem> batch) override;
  const BiasParams* bias_params() const override { return &p_.mf.bias; }
  NarreParams& params() { return p_; }

  /// Attention weights over an entity's non-empty reviews (empty when it has none).
  std::vector<double> user_attention(std::uint32_t user);
  std::vector<double> item_attention(std::uint32_t item);

 private:
  struct Latent {
    ad::Tensor value;        // (K)
    ad::Tensor attention;    // (r) or undefined
  };
  Latent entity_latent(ad::Tape& tape, const NarreSide& side, const EntityDocs& docs,
                       std::uint32_t entity);
  ad::Tensor side_latents(ad::Tape& tape, const NarreSide& side, const EntityDocs& docs,
                          std::span<const std::uint32_t> ids);
  NarreParams p_;
};

std::unique_ptr<Model> make_model(ModelKind kind, ModelContext context, TrainConfig config);

/// Adam with decoupled bias correction and L2 folded into the gradient.
class Adam {
 public:
  Adam(const Model& model, double learning_rate, double weight_decay);
  void step();

 private:
  struct Slot {
    ad::Tensor param;
    std::vector<double> m;
    std::vector<double> v;
    bool decay = true;
  };
  std::vector<Slot> slots_;
  double lr_;
  double weight_decay_;
  std::size_t t_ = 0;
};

struct TrainResult {
  /// Validation MSE (clipped predictions) after each epoch.
  std::vector<double> val_mse;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  std::size_t epochs_run = 0;
};

/// Mini-batch Adam on the training partition with early stopping on
/// validation MSE; restores the best epoch's parameters. Throws
/// DivergenceError when the loss becomes non-finite.
TrainResult fit(Model& model);

struct TrainedModel {
  std::unique_ptr<Model> model;
  TrainResult result;
};

TrainedModel train(ModelKind kind, ModelContext context, TrainConfig config);

/// Clipped predictions for rows of the model's dataset.
std::vector<double> predict_rows(Model& model, std::span<const std::size_t> rows);

/// Checkpoint = parameter file + JSON manifest naming model kind, config and
/// data fingerprints.
struct CheckpointManifest {
  ModelKind kind = ModelKind::Bias;
  TrainConfig config;
  std::string dataset_hash;
  std::string vocab_hash;
  std::string split_hash;
};

std::string split_fingerprint(const SplitDataset& split);
void save_checkpoint(const std::filesystem::path& dir, Model& model, const CheckpointManifest& m);
CheckpointManifest load_manifest(const std::filesystem::path& dir);
/// Rebuilds the model for `context` and loads its parameters. Throws
/// DataError naming both hashes when the manifest does not match the data.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& dir, ModelContext context);

}  // namespace revrec
