#include "revrec/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <unordered_map>

#include "revrec/error.hpp"

namespace revrec {

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954;
constexpr std::uint64_t kHftStream = 0x484654;

constexpr std::array<ModelKind, 7> kAllKinds = {ModelKind::Bias,     ModelKind::MF,
                                                ModelKind::HFT,      ModelKind::NeuMF,
                                                ModelKind::DeepCoNN, ModelKind::DeepCoNNPlus,
                                                ModelKind::NARRE};

std::vector<std::size_t> user_ids(std::span<const UserItem> batch) {
  std::vector<std::size_t> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) out[b] = batch[b].user;
  return out;
}

std::vector<std::size_t> item_ids(std::span<const UserItem> batch) {
  std::vector<std::size_t> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) out[b] = batch[b].item;
  return out;
}

double train_mean(const SplitDataset& s) {
  if (s.train.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t r : s.train) acc += s.dataset()[r].rating;
  return acc / static_cast<double>(s.train.size());
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Bias: return "bias";
    case ModelKind::MF: return "mf";
    case ModelKind::HFT: return "hft";
    case ModelKind::NeuMF: return "neumf";
    case ModelKind::DeepCoNN: return "deepconn";
    case ModelKind::DeepCoNNPlus: return "deepconn++";
    case ModelKind::NARRE: return "narre";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view name) {
  for (ModelKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown model '" + std::string(name) +
                    "' (expected bias, mf, hft, neumf, deepconn, deepconn++ or narre)");
}

std::span<const ModelKind> all_model_kinds() { return kAllKinds; }

bool uses_text(ModelKind kind) {
  return kind == ModelKind::HFT || kind == ModelKind::DeepCoNN ||
         kind == ModelKind::DeepCoNNPlus || kind == ModelKind::NARRE;
}

bool uses_latent_dim(ModelKind kind) { return kind != ModelKind::Bias; }

bool uses_dropout(ModelKind kind) {
  return kind == ModelKind::NeuMF || kind == ModelKind::DeepCoNN ||
         kind == ModelKind::DeepCoNNPlus || kind == ModelKind::NARRE;
}

std::optional<DocLayout> document_layout(ModelKind kind) {
  switch (kind) {
    case ModelKind::DeepCoNN:
    case ModelKind::DeepCoNNPlus: return DocLayout::Concat;
    case ModelKind::NARRE: return DocLayout::PerReview;
    default: return std::nullopt;
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid training config: " + what); };
  if (latent_dim == 0) fail("latent_dim must be positive");
  if (!(l2 >= 0.0) || !std::isfinite(l2)) fail("l2 must be a finite non-negative number");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (!(hft_mu >= 0.0) || !std::isfinite(hft_mu)) fail("hft_mu must be non-negative");
  if (hft_resample_period == 0) fail("hft_resample_period must be positive");
  if (cnn_filters == 0) fail("cnn_filters must be positive");
  if (cnn_width % 2 == 0) fail("cnn_width must be odd");
  if (attention_dim == 0) fail("attention_dim must be positive");
}

double predict_bias(const BiasParams& p, std::uint32_t user, std::uint32_t item) {
  return p.alpha[0] + p.user_bias[user] + p.item_bias[item];
}

double predict_mf(const MfParams& p, std::uint32_t user, std::uint32_t item) {
  const std::size_t k = p.user_factors.dim(1);
  double dot = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    dot += p.user_factors[user * k + j] * p.item_factors[item * k + j];
  }
  return predict_bias(p.bias, user, item) + dot;
}

// ---------------------------------------------------------------- Model

Model::Model(ModelKind kind, ModelContext context, TrainConfig config)
    : kind_(kind),
      context_(std::move(context)),
      config_(config),
      init_rng_(derive_seed(config.seed, {kInitStream})) {
  if (!context_.split) throw ConfigError("model context has no split");
  config_.validate();
  if (uses_text(kind_) && !context_.text) {
    throw ConfigError(std::string(to_string(kind_)) + " needs prepared text artifacts");
  }
  const Dataset& d = context_.dataset();
  seen_users_.assign(d.num_users(), 0);
  seen_items_.assign(d.num_items(), 0);
  for (std::size_t r : context_.split->train) {
    seen_users_[d[r].user] = 1;
    seen_items_[d[r].item] = 1;
  }
}

ad::Tensor Model::add_param(const std::string& name, ad::Shape shape, bool zero_init) {
  ad::Tensor t = ad::Tensor::zeros(shape, true);
  if (!zero_init && shape.size() >= 2) {
    const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    for (double& v : t.values()) v = uniform(init_rng_, -bound, bound);
  }
  register_param(name, t);
  return t;
}

void Model::register_param(const std::string& name, ad::Tensor t) {
  for (const auto& [n, _] : params_) {
    if (n == name) throw Error("duplicate parameter name " + name);
  }
  params_.emplace_back(name, std::move(t));
}

BiasParams Model::make_bias_params() {
  const Dataset& d = context_.dataset();
  BiasParams p;
  p.alpha = add_param("alpha", {1}, true);
  p.alpha[0] = train_mean(*context_.split);
  p.user_bias = add_param("user_bias", {d.num_users(), 1}, true);
  p.item_bias = add_param("item_bias", {d.num_items(), 1}, true);
  return p;
}

MfParams Model::make_mf_params() {
  const Dataset& d = context_.dataset();
  MfParams p;
  p.bias = make_bias_params();
  p.user_factors = add_param("user_factors", {d.num_users(), config_.latent_dim});
  p.item_factors = add_param("item_factors", {d.num_items(), config_.latent_dim});
  return p;
}

ConvEncoder Model::make_encoder(const std::string& prefix, std::size_t embedding_dim) {
  ConvEncoder e;
  e.filters = add_param(prefix + "_conv_filters", {config_.cnn_width * embedding_dim, config_.cnn_filters});
  e.bias = add_param(prefix + "_conv_bias", {config_.cnn_filters}, true);
  return e;
}

ad::Tensor Model::bias_terms(ad::Tape& tape, const BiasParams& p, std::span<const UserItem> batch) {
  const auto bu = ad::gather_rows(tape, p.user_bias, user_ids(batch));
  const auto bi = ad::gather_rows(tape, p.item_bias, item_ids(batch));
  const auto both = ad::reshape(tape, ad::add(tape, bu, bi), {batch.size()});
  return ad::add_scalar(tape, both, p.alpha);
}

ad::Tensor Model::loss(ad::Tape& tape, std::span<const std::size_t> rows) {
  const Dataset& d = context_.dataset();
  std::vector<UserItem> batch(rows.size());
  std::vector<double> target(rows.size());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    batch[b] = {d[rows[b]].user, d[rows[b]].item};
    target[b] = d[rows[b]].rating;
  }
  return ad::mse_loss(tape, forward(tape, batch), target);
}

void Model::end_epoch(std::size_t) {}

bool Model::decays(const std::string& name) const { return name != "alpha"; }

std::vector<double> Model::predict(std::span<const UserItem> pairs, std::size_t batch) {
  std::vector<double> out;
  out.reserve(pairs.size());
  batch = std::max<std::size_t>(1, batch);
  for (std::size_t lo = 0; lo < pairs.size(); lo += batch) {
    const auto chunk = pairs.subspan(lo, std::min(batch, pairs.size() - lo));
    ad::Tape tape({.training = false, .record = false});
    const ad::Tensor pred = forward(tape, chunk);
    out.insert(out.end(), pred.values().begin(), pred.values().end());
  }
  if (const BiasParams* bp = bias_params()) {
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [u, i] = pairs[k];
      const bool su = seen_user(u), si = seen_item(i);
      if (su && si) continue;
      out[k] = bp->alpha[0] + (su ? bp->user_bias[u] : 0.0) + (si ? bp->item_bias[i] : 0.0);
    }
  }
  return out;
}

void Model::load_state(const std::map<std::string, ad::Tensor>& state) {
  if (state.size() != params_.size()) {
    throw DataError("checkpoint holds " + std::to_string(state.size()) + " tensors, model has " +
                    std::to_string(params_.size()));
  }
  for (auto& [name, t] : params_) {
    auto it = state.find(name);
    if (it == state.end()) throw DataError("checkpoint lacks parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw DataError("parameter " + name + ": checkpoint shape " + ad::to_string(it->second.shape()) +
                      " vs model shape " + ad::to_string(t.shape()));
    }
    std::copy(it->second.values().begin(), it->second.values().end(), t.values().begin());
  }
}

// ---------------------------------------------------------------- Bias / MF

BiasModel::BiasModel(ModelContext context, TrainConfig config)
    : Model(ModelKind::Bias, std::move(context), config), p_(make_bias_params()) {}

ad::Tensor BiasModel::forward(ad::Tape& tape, std::span<const UserItem> batch) {
  return bias_terms(tape, p_, batch);
}

MfModel::MfModel(ModelContext context, TrainConfig config)
    : MfModel(ModelKind::MF, std::move(context), config) {}

MfModel::MfModel(ModelKind kind, ModelContext context, TrainConfig config)
    : Model(kind, std::move(context), config), p_(make_mf_params()) {}

ad::Tensor MfModel::forward(ad::Tape& tape, std::span<const UserItem> batch) {
  const auto gu = ad::gather_rows(tape, p_.user_factors, user_ids(batch));
  const auto gi = ad::gather_rows(tape, p_.item_factors, item_ids(batch));
  return ad::add(tape, bias_terms(tape, p_.bias, batch), ad::row_dot(tape, gu, gi));
}

// ---------------------------------------------------------------- HFT

HftModel::HftModel(ModelContext context, TrainConfig config)
    : MfModel(ModelKind::HFT, std::move(context), config) {
  h_.mf = params();
  const std::size_t k = config.latent_dim;
  const std::size_t v = this->context().text->vocab.size();
  h_.word_topic = add_param("word_topic", {k, v});
  h_.kappa = add_param("kappa", {1}, true);
  h_.kappa[0] = 1.0;

  const SplitDataset& s = *this->context().split;
  const auto& ids = this->context().text->ids;
  offsets_.assign(s.dataset().size(), -1);
  std::size_t total = 0;
  for (std::size_t r : s.train) {
    offsets_[r] = static_cast<std::int64_t>(total);
    total += ids[r].size();
  }
  topics_.assign(total, 0);
  resample(derive_seed(config.seed, {kHftStream, 0}));
}

std::vector<double> HftModel::topic_word_distribution() const {
  const std::size_t k = h_.word_topic.dim(0), v = h_.word_topic.dim(1);
  std::vector<double> phi(h_.word_topic.values().begin(), h_.word_topic.values().end());
  for (std::size_t t = 0; t < k; ++t) {
    double* row = phi.data() + t * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t w = 0; w < v; ++w) z += (row[w] = std::exp(row[w] - mx));
    for (std::size_t w = 0; w < v; ++w) row[w] /= z;
  }
  return phi;
}

std::vector<double> HftModel::item_topic_distribution(std::uint32_t item) const {
  const std::size_t k = num_topics();
  std::vector<double> theta(k);
  const double kappa = h_.kappa[0];
  for (std::size_t t = 0; t < k; ++t) theta[t] = kappa * h_.mf.item_factors[item * k + t];
  const double mx = *std::max_element(theta.begin(), theta.end());
  double z = 0.0;
  for (double& x : theta) z += (x = std::exp(x - mx));
  for (double& x : theta) x /= z;
  return theta;
}

std::span<const std::uint32_t> HftModel::assignments(std::size_t row) const {
  if (row >= offsets_.size() || offsets_[row] < 0) return {};
  const auto& ids = context().text->ids;
  return {topics_.data() + offsets_[row], ids[row].size()};
}

void HftModel::resample(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t k = num_topics(), v = h_.word_topic.dim(1);
  const std::vector<double> phi = topic_word_distribution();
  const SplitDataset& s = *context().split;
  const auto& ids = context().text->ids;
  std::vector<std::vector<double>> theta(s.dataset().num_items());
  std::vector<double> cum(k);
  for (std::size_t r : s.train) {
    const std::uint32_t item = s.dataset()[r].item;
    if (theta[item].empty()) theta[item] = item_topic_distribution(item);
    std::uint32_t* z = topics_.data() + offsets_[r];
    for (std::size_t p = 0; p < ids[r].size(); ++p) {
      const auto w = static_cast<std::size_t>(ids[r][p]);
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) cum[t] = (acc += theta[item][t] * phi[t * v + w]);
      const double x = uniform01(rng) * acc;
      std::size_t t = 0;
      while (t + 1 < k && cum[t] <= x) ++t;
      z[p] = static_cast<std::uint32_t>(t);
    }
  }
}

void HftModel::end_epoch(std::size_t epoch) {
  if ((epoch + 1) % config().hft_resample_period != 0) return;
  resample(derive_seed(config().seed, {kHftStream, ++rounds_}));
}

ad::Tensor HftModel::likelihood(ad::Tape& tape, std::span<const std::size_t> rows) {
  const Dataset& d = context().dataset();
  const auto& ids = context().text->ids;
  const std::size_t k = num_topics(), v = h_.word_topic.dim(1);
  std::vector<std::size_t> items(rows.size());
  std::vector<double> topic_counts(rows.size() * k, 0.0);
  std::unordered_map<std::size_t, double> word_counts;
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const std::size_t r = rows[b];
    items[b] = d[r].item;
    const auto z = assignments(r);
    for (std::size_t p = 0; p < z.size(); ++p) {
      topic_counts[b * k + z[p]] += 1.0;
      word_counts[z[p] * v + static_cast<std::size_t>(ids[r][p])] += 1.0;
    }
  }
  std::vector<std::size_t> theta_idx, phi_idx;
  std::vector<double> theta_w, phi_w;
  for (std::size_t j = 0; j < topic_counts.size(); ++j) {
    if (topic_counts[j] == 0.0) continue;
    theta_idx.push_back(j);
    theta_w.push_back(topic_counts[j]);
  }
  phi_idx.reserve(word_counts.size());
  for (const auto& [j, c] : word_counts) {
    phi_idx.push_back(j);
  }
  std::sort(phi_idx.begin(), phi_idx.end());
  for (std::size_t j : phi_idx) phi_w.push_back(word_counts[j]);

  const auto gamma = ad::gather_rows(tape, h_.mf.item_factors, items);
  const auto log_theta = ad::log_softmax(tape, ad::mul_scalar(tape, h_.kappa, gamma));
  const auto log_phi = ad::log_softmax(tape, h_.word_topic);
  return ad::add(tape, ad::gather_sum(tape, log_theta, theta_idx, theta_w),
                 ad::gather_sum(tape, log_phi, phi_idx, phi_w));
}

ad::Tensor HftModel::loss(ad::Tape& tape, std::span<const std::size_t> rows) {
  ad::Tensor sq = MfModel::loss(tape, rows);
  if (config().hft_mu == 0.0 || rows.empty()) return sq;
  const double c = -config().hft_mu / static_cast<double>(rows.size());
  return ad::add(tape, sq, ad::scale(tape, likelihood(tape, rows), c));
}

double HftModel::log_likelihood(std::span<const std::size_t> rows) {
  ad::Tape tape({.training = false, .record = false});
  return likelihood(tape, rows).item();
}

double HftModel::objective(std::span<const std::size_t> rows) {
  ad::Tape tape({.training = false, .record = false});
  return loss(tape, rows).item();
}

// ---------------------------------------------------------------- NeuMF

NeuMfModel::NeuMfModel(ModelContext context, TrainConfig config)
    : Model(ModelKind::NeuMF, std::move(context), config) {
  const std::size_t k = config.latent_dim;
  const std::size_t k2 = std::max<std::size_t>(1, k / 2);
  p_.mf = make_mf_params();
  p_.mlp_w1 = add_param("mlp_w1", {2 * k, k});
  p_.mlp_b1 = add_param("mlp_b1", {k}, true);
  p_.mlp_w2 = add_param("mlp_w2", {k, k2});
  p_.mlp_b2 = add_param("mlp_b2", {k2}, true);
  p_.out_w = add_param("out_w", {k + k2, 1});
  p_.out_b = add_param("out_b", {1}, true);
}

ad::Tensor NeuMfModel::forward(ad::Tape& tape, std::span<const UserItem> batch) {
  const double p = config().dropout;
  const auto gu = ad::gather_rows(tape, p_.mf.user_factors, user_ids(batch));
  const auto gi = ad::gather_rows(tape, p_.mf.item_factors, item_ids(batch));
  const auto gmf = ad::mul(tape, gu, gi);
  auto h = ad::concat(tape, gu, gi);
  h = ad::dropout(tape, ad::relu(tape, ad::add_bias(tape, ad::matmul(tape, h, p_.mlp_w1), p_.mlp_b1)), p);
  h = ad::dropout(tape, ad::relu(tape, ad::add_bias(tape, ad::matmul(tape, h, p_.mlp_w2), p_.mlp_b2)), p);
  const auto joined = ad::concat(tape, gmf, h);
  const auto f = ad::add_bias(tape, ad::matmul(tape, joined, p_.out_w), p_.out_b);
  return ad::add(tape, bias_terms(tape, p_.mf.bias, batch), ad::reshape(tape, f, {batch.size()}));
}

// ---------------------------------------------------------------- factory

std::unique_ptr<Model> make_model(ModelKind kind, ModelContext context, TrainConfig config) {
  switch (kind) {
    case ModelKind::Bias: return std::make_unique<BiasModel>(std::move(context), config);
    case ModelKind::MF: return std::make_unique<MfModel>(std::move(context), config);
    case ModelKind::HFT: return std::make_unique<HftModel>(std::move(context), config);
    case ModelKind::NeuMF: return std::make_unique<NeuMfModel>(std::move(context), config);
    case ModelKind::DeepCoNN:
    case ModelKind::DeepCoNNPlus:
      return std::make_unique<DeepConnModel>(kind, std::move(context), config);
    case ModelKind::NARRE: return std::make_unique<NarreModel>(std::move(context), config);
  }
  throw ConfigError("unknown model kind");
}

}  // namespace revrec
