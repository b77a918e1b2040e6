#include <algorithm>
#include <unordered_map>

#include "revrec/error.hpp"
#include "revrec/models.hpp"

namespace revrec {

namespace {

// Distinct ids in first-seen order plus each batch position's slot among them.
struct Dedup {
  std::vector<std::uint32_t> unique;
  std::vector<std::size_t> slot;
};

template <typename Get>
Dedup dedup(std::span<const UserItem> batch, Get get) {
  Dedup d;
  std::unordered_map<std::uint32_t, std::size_t> where;
  d.slot.reserve(batch.size());
  for (const UserItem& x : batch) {
    const std::uint32_t id = get(x);
    auto [it, fresh] = where.try_emplace(id, d.unique.size());
    if (fresh) d.unique.push_back(id);
    d.slot.push_back(it->second);
  }
  return d;
}

}  // namespace

TextModelBase::TextModelBase(ModelKind kind, ModelContext ctx, TrainConfig cfg)
    : Model(kind, std::move(ctx), cfg) {
  const EmbeddingTable& e = context().text->embeddings;
  if (e.rows == 0 || e.dim == 0) {
    throw ConfigError(std::string(to_string(kind)) + " needs word embeddings");
  }
  embeddings_ = ad::Tensor::from({e.rows, e.dim}, e.values, config().finetune_embeddings);
  if (config().finetune_embeddings) register_param("word_embeddings", embeddings_);
}

ad::Tensor TextModelBase::encode(ad::Tape& tape, const ConvEncoder& enc, std::span<const TokenId> seq,
                                 std::uint32_t length) {
  // Positions further than width/2 past the last real token only see zero
  // padding rows and all produce the bias. Keeping one of them preserves the
  // max-over-time value and its gradient.
  const std::size_t width = config().cnn_width;
  const std::size_t n = std::min<std::size_t>(seq.size(), length + width / 2 + 1);
  const auto x = ad::embed_lookup(tape, embeddings_, seq.first(n));
  const auto c = ad::conv1d(tape, x, enc.filters, enc.bias, width);
  return ad::max_over_time(tape, ad::relu(tape, c));
}

// ---------------------------------------------------------------- DeepCoNN

DeepConnModel::DeepConnModel(ModelKind kind, ModelContext ctx, TrainConfig cfg)
    : TextModelBase(kind, std::move(ctx), cfg) {
  if (kind != ModelKind::DeepCoNN && kind != ModelKind::DeepCoNNPlus) {
    throw ConfigError("DeepConnModel built for " + std::string(to_string(kind)));
  }
  if (context().text->concat.users.entities != context().dataset().num_users()) {
    throw ConfigError("deepconn needs concatenated review documents");
  }
  const std::size_t k = config().latent_dim, f = config().cnn_filters;
  auto make_tower = [&](const std::string& side) {
    DeepConnTower t;
    t.conv = make_encoder(side, embedding_dim());
    t.proj_w = add_param(side + "_proj_w", {f, k});
    t.proj_b = add_param(side + "_proj_b", {k}, true);
    return t;
  };
  p_.user_tower = make_tower("user");
  p_.item_tower = make_tower("item");
  p_.reg_w = add_param("reg_w", {2 * k, 1});
  p_.reg_b = add_param("reg_b", {1}, true);
  if (kind == ModelKind::DeepCoNNPlus) p_.bias = make_bias_params();
}

ad::Tensor DeepConnModel::tower(ad::Tape& tape, const DeepConnTower& t, const EntityDocs& docs,
                                std::span<const std::uint32_t> ids) {
  std::vector<ad::Tensor> pooled;
  pooled.reserve(ids.size());
  for (std::uint32_t e : ids) pooled.push_back(encode(tape, t.conv, docs.sequence(e, 0), docs.length(e, 0)));
  const auto stacked = ad::stack_rows(tape, pooled);
  return ad::add_bias(tape, ad::matmul(tape, stacked, t.proj_w), t.proj_b);
}

ad::Tensor DeepConnModel::forward(ad::Tape& tape, std::span<const UserItem> batch) {
  const ReviewDocs& docs = context().text->concat;
  const double p = config().dropout;
  const Dedup us = dedup(batch, [](const UserItem& x) { return x.user; });
  const Dedup is = dedup(batch, [](const UserItem& x) { return x.item; });
  auto xu = ad::gather_rows(tape, tower(tape, p_.user_tower, docs.users, us.unique), us.slot);
  auto yi = ad::gather_rows(tape, tower(tape, p_.item_tower, docs.items, is.unique), is.slot);
  xu = ad::dropout(tape, xu, p);
  yi = ad::dropout(tape, yi, p);
  const auto z = ad::concat(tape, xu, yi);
  auto out = ad::reshape(tape, ad::add_bias(tape, ad::matmul(tape, z, p_.reg_w), p_.reg_b), {batch.size()});
  if (p_.bias) out = ad::add(tape, bias_terms(tape, *p_.bias, batch), out);
  return out;
}

// ---------------------------------------------------------------- NARRE

NarreModel::NarreModel(ModelContext ctx, TrainConfig cfg)
    : TextModelBase(ModelKind::NARRE, std::move(ctx), cfg) {
  const Dataset& d = context().dataset();
  if (context().text->per_review.users.entities != d.num_users()) {
    throw ConfigError("narre needs per-review documents");
  }
  const std::size_t k = config().latent_dim, f = config().cnn_filters, a = config().attention_dim;
  p_.mf = make_mf_params();
  auto make_side = [&](const std::string& side, std::size_t counterparts) {
    NarreSide s;
    s.conv = make_encoder(side, embedding_dim());
    s.att_review = add_param(side + "_att_review", {f, a});
    s.att_id = add_param(side + "_att_id", {k, a});
    s.att_bias = add_param(side + "_att_bias", {a}, true);
    s.att_score = add_param(side + "_att_score", {a, 1});
    s.proj_w = add_param(side + "_proj_w", {f, k});
    s.proj_b = add_param(side + "_proj_b", {k}, true);
    s.key_table = add_param(side + "_att_keys", {counterparts, k});
    return s;
  };
  p_.user_side = make_side("user", d.num_items());
  p_.item_side = make_side("item", d.num_users());
  p_.out_w = add_param("out_w", {k, 1});
  p_.out_b = add_param("out_b", {1}, true);
}

NarreModel::Latent NarreModel::entity_latent(ad::Tape& tape, const NarreSide& side,
                                             const EntityDocs& docs, std::uint32_t entity) {
  const std::size_t k = config().latent_dim;
  std::vector<ad::Tensor> enc;
  std::vector<std::size_t> keys;
  for (std::size_t s = 0; s < docs.used[entity]; ++s) {
    const std::uint32_t len = docs.length(entity, s);
    if (len == 0) continue;  // masked or empty review
    enc.push_back(encode(tape, side.conv, docs.sequence(entity, s), len));
    keys.push_back(static_cast<std::size_t>(docs.counterpart_of(entity, s)));
  }
  if (enc.empty()) return {ad::Tensor::zeros({k}), {}};
  const std::size_t r = enc.size();
  const auto o = ad::stack_rows(tape, enc);
  const auto ids = ad::gather_rows(tape, side.key_table, keys);
  auto h = ad::add(tape, ad::matmul(tape, o, side.att_review), ad::matmul(tape, ids, side.att_id));
  h = ad::relu(tape, ad::add_bias(tape, h, side.att_bias));
  const auto scores = ad::reshape(tape, ad::matmul(tape, h, side.att_score), {r});
  const auto weights = ad::softmax(tape, scores);
  const auto pooled = ad::matmul(tape, ad::reshape(tape, weights, {1, r}), o);
  const auto latent = ad::add_bias(tape, ad::matmul(tape, pooled, side.proj_w), side.proj_b);
  return {ad::reshape(tape, latent, {k}), weights};
}

ad::Tensor NarreModel::side_latents(ad::Tape& tape, const NarreSide& side, const EntityDocs& docs,
                                    std::span<const std::uint32_t> ids) {
  std::vector<ad::Tensor> rows;
  rows.reserve(ids.size());
  for (std::uint32_t e : ids) rows.push_back(entity_latent(tape, side, docs, e).value);
  return ad::stack_rows(tape, rows);
}

ad::Tensor NarreModel::forward(ad::Tape& tape, std::span<const UserItem> batch) {
  const ReviewDocs& docs = context().text->per_review;
  const double p = config().dropout;
  const Dedup us = dedup(batch, [](const UserItem& x) { return x.user; });
  const Dedup is = dedup(batch, [](const UserItem& x) { return x.item; });
  std::vector<std::size_t> users(batch.size()), items(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    users[b] = batch[b].user;
    items[b] = batch[b].item;
  }
  auto xu = ad::gather_rows(tape, side_latents(tape, p_.user_side, docs.users, us.unique), us.slot);
  auto yi = ad::gather_rows(tape, side_latents(tape, p_.item_side, docs.items, is.unique), is.slot);
  xu = ad::dropout(tape, xu, p);
  yi = ad::dropout(tape, yi, p);
  const auto hu = ad::add(tape, ad::gather_rows(tape, p_.mf.user_factors, users), xu);
  const auto hi = ad::add(tape, ad::gather_rows(tape, p_.mf.item_factors, items), yi);
  const auto f = ad::add_bias(tape, ad::matmul(tape, ad::mul(tape, hu, hi), p_.out_w), p_.out_b);
  return ad::add(tape, bias_terms(tape, p_.mf.bias, batch), ad::reshape(tape, f, {batch.size()}));
}

std::vector<double> NarreModel::user_attention(std::uint32_t user) {
  ad::Tape tape({.training = false, .record = false});
  const auto l = entity_latent(tape, p_.user_side, context().text->per_review.users, user);
  if (!l.attention.defined()) return {};
  return {l.attention.values().begin(), l.attention.values().end()};
}

std::vector<double> NarreModel::item_attention(std::uint32_t item) {
  ad::Tape tape({.training = false, .record = false});
  const auto l = entity_latent(tape, p_.item_side, context().text->per_review.items, item);
  if (!l.attention.defined()) return {};
  return {l.attention.values().begin(), l.attention.values().end()};
}

}  // namespace revrec
