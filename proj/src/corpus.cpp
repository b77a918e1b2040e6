#include "revrec/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "revrec/error.hpp"
#include "revrec/hash.hpp"
#include "revrec/random.hpp"

namespace revrec {

namespace {

constexpr std::uint64_t kSplitStream = 0x5350'4c49'54ULL;
constexpr std::uint64_t kMaskStream = 0x4d41'534bULL;

std::uint32_t intern(std::unordered_map<std::string, std::uint32_t>& index,
                     std::vector<std::string>& keys, const std::string& key) {
  auto [it, inserted] = index.try_emplace(key, static_cast<std::uint32_t>(keys.size()));
  if (inserted) keys.push_back(key);
  return it->second;
}

// Ids may be strings or numbers depending on the source schema.
bool json_key(const nlohmann::json& v, std::string& out) {
  if (v.is_string()) {
    out = v.get<std::string>();
    return true;
  }
  if (v.is_number_integer() || v.is_number_unsigned()) {
    out = v.dump();
    return true;
  }
  return false;
}

bool json_number(const nlohmann::json& v, double& out) {
  if (v.is_number()) {
    out = v.get<double>();
    return true;
  }
  if (v.is_string()) {
    const auto& s = v.get_ref<const std::string&>();
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end != s.c_str() && *end == '\0' && std::isfinite(out);
  }
  return false;
}

std::string escape_field(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out.push_back(s[i]);
      continue;
    }
    switch (s[++i]) {
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      default: out.push_back(s[i]);
    }
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      parts.push_back(line.substr(start));
      return parts;
    }
    parts.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void Dataset::add(const std::string& user_key, const std::string& item_key, double rating,
                  std::string review, std::int64_t timestamp, std::uint64_t seq) {
  Interaction x;
  x.user = intern(user_index_, user_keys_, user_key);
  x.item = intern(item_index_, item_keys_, item_key);
  x.rating = rating;
  x.review = std::move(review);
  x.timestamp = timestamp;
  x.seq = seq;
  interactions_.push_back(std::move(x));
}

std::int64_t Dataset::find_user(const std::string& key) const {
  auto it = user_index_.find(key);
  return it == user_index_.end() ? -1 : static_cast<std::int64_t>(it->second);
}

std::int64_t Dataset::find_item(const std::string& key) const {
  auto it = item_index_.find(key);
  return it == item_index_.end() ? -1 : static_cast<std::int64_t>(it->second);
}

Dataset Dataset::with_reviews_cleared(std::span<const std::size_t> rows) const {
  Dataset copy = *this;
  for (std::size_t r : rows) copy.interactions_.at(r).review.clear();
  return copy;
}

std::string Dataset::fingerprint() const {
  Sha256 h;
  h.update("revrec-dataset-v1").update_f64(scale_.min).update_f64(scale_.max);
  h.update_u64(interactions_.size());
  for (const auto& x : interactions_) {
    h.update(user_keys_[x.user]).update(std::string_view("\0", 1));
    h.update(item_keys_[x.item]).update(std::string_view("\0", 1));
    h.update_f64(x.rating).update_u64(static_cast<std::uint64_t>(x.timestamp));
    h.update_u64(x.review.size()).update(x.review);
  }
  return h.hex();
}

LoadResult load_interactions(const std::filesystem::path& path, const FieldMap& fields,
                             RatingScale scale) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  LoadResult result{Dataset(scale), {}};
  std::string line;
  std::uint64_t seq = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::uint64_t row = seq++;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (rec.is_discarded() || !rec.is_object()) {
      ++result.report.malformed;
      continue;
    }
    auto field = [&](const std::string& name) -> const nlohmann::json* {
      auto it = rec.find(name);
      return it == rec.end() || it->is_null() ? nullptr : &*it;
    };
    const auto* user = field(fields.user);
    const auto* item = field(fields.item);
    const auto* rating = field(fields.rating);
    const auto* review = field(fields.review);
    if (!user || !item || !rating || !review) {
      ++result.report.skipped_missing_field;
      continue;
    }
    std::string user_key, item_key;
    double r = 0.0;
    if (!json_key(*user, user_key) || !json_key(*item, item_key) || !json_number(*rating, r) ||
        !review->is_string()) {
      ++result.report.malformed;
      continue;
    }
    if (!scale.contains(r)) {
      ++result.report.rejected_out_of_scale;
      continue;
    }
    std::int64_t ts = 0;
    if (!fields.timestamp.empty()) {
      if (const auto* t = field(fields.timestamp)) {
        double tv = 0.0;
        if (json_number(*t, tv)) ts = static_cast<std::int64_t>(tv);
      }
    }
    result.dataset.add(user_key, item_key, r, review->get<std::string>(), ts, row);
    ++result.report.loaded;
  }
  if (in.bad()) throw IoError("read error on " + path.string());
  return result;
}

Dataset k_core(const Dataset& d, std::size_t k) {
  const auto rows = d.interactions();
  std::vector<std::vector<std::size_t>> by_user(d.num_users()), by_item(d.num_items());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    by_user[rows[r].user].push_back(r);
    by_item[rows[r].item].push_back(r);
  }
  std::vector<std::size_t> user_deg(d.num_users()), item_deg(d.num_items());
  for (std::size_t u = 0; u < by_user.size(); ++u) user_deg[u] = by_user[u].size();
  for (std::size_t i = 0; i < by_item.size(); ++i) item_deg[i] = by_item[i].size();

  std::vector<char> alive(rows.size(), 1);
  std::vector<char> user_gone(d.num_users(), 0), item_gone(d.num_items(), 0);
  // Node ids: users are [0, |U|), items are offset by |U|.
  const std::size_t n_users = d.num_users();
  std::deque<std::size_t> queue;
  for (std::size_t u = 0; u < n_users; ++u) {
    if (user_deg[u] < k) {
      user_gone[u] = 1;
      queue.push_back(u);
    }
  }
  for (std::size_t i = 0; i < d.num_items(); ++i) {
    if (item_deg[i] < k) {
      item_gone[i] = 1;
      queue.push_back(n_users + i);
    }
  }
  while (!queue.empty()) {
    const std::size_t node = queue.front();
    queue.pop_front();
    const bool is_user = node < n_users;
    const auto& incident = is_user ? by_user[node] : by_item[node - n_users];
    for (std::size_t r : incident) {
      if (!alive[r]) continue;
      alive[r] = 0;
      if (is_user) {
        const std::uint32_t i = rows[r].item;
        if (--item_deg[i] < k && !item_gone[i]) {
          item_gone[i] = 1;
          queue.push_back(n_users + i);
        }
      } else {
        const std::uint32_t u = rows[r].user;
        if (--user_deg[u] < k && !user_gone[u]) {
          user_gone[u] = 1;
          queue.push_back(u);
        }
      }
    }
  }

  Dataset out(d.scale());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (!alive[r]) continue;
    const auto& x = rows[r];
    out.add(d.user_key(x.user), d.item_key(x.item), x.rating, x.review, x.timestamp, x.seq);
  }
  return out;
}

SplitDataset split(std::shared_ptr<const Dataset> d, std::uint64_t seed) {
  const std::size_t n = d->size();
  if (n < 10) {
    throw DataError("split needs at least 10 interactions, got " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < n; ++r) order[r] = r;
  Rng rng(derive_seed(seed, {kSplitStream}));
  shuffle(std::span<std::size_t>(order), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  SplitDataset s;
  s.data = std::move(d);
  s.seed = seed;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.validation.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

SplitDataset mask_reviews(const SplitDataset& s, double percent, std::uint64_t seed) {
  if (!(percent >= 0.0 && percent <= 100.0)) {
    throw ConfigError("mask percentage must lie in [0, 100], got " + format_real(percent));
  }
  const auto count = static_cast<std::size_t>(
      std::llround(percent / 100.0 * static_cast<double>(s.train.size())));
  if (count == 0) return s;

  std::vector<std::size_t> chosen = s.train;
  Rng rng(derive_seed(seed, {kMaskStream}));
  shuffle(std::span<std::size_t>(chosen), rng);
  chosen.resize(count);

  SplitDataset out = s;
  out.data = std::make_shared<const Dataset>(s.data->with_reviews_cleared(chosen));
  return out;
}

DatasetStats stats(const Dataset& d) { return {d.size(), d.num_users(), d.num_items()}; }

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "#revrec-dataset\t1\n";
  out << "#scale\t" << format_real(d.scale().min) << '\t' << format_real(d.scale().max) << '\n';
  for (const auto& x : d.interactions()) {
    out << escape_field(d.user_key(x.user)) << '\t' << escape_field(d.item_key(x.item)) << '\t'
        << format_real(x.rating) << '\t' << x.timestamp << '\t' << x.seq << '\t'
        << escape_field(x.review) << '\n';
  }
  if (!out) throw IoError("write failed on " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "#revrec-dataset\t1") {
    throw DataError(path.string() + ": not a version 1 dataset cache");
  }
  if (!std::getline(in, line) || !line.starts_with("#scale\t")) {
    throw DataError(path.string() + ": missing scale header");
  }
  const auto scale_parts = split_tabs(line);
  if (scale_parts.size() != 3) throw DataError(path.string() + ": bad scale header");
  Dataset d(RatingScale{std::stod(std::string(scale_parts[1])),
                        std::stod(std::string(scale_parts[2]))});
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    const auto parts = split_tabs(line);
    if (parts.size() != 6) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    }
    d.add(unescape_field(parts[0]), unescape_field(parts[1]), std::stod(std::string(parts[2])),
          unescape_field(parts[5]), std::stoll(std::string(parts[3])),
          std::stoull(std::string(parts[4])));
  }
  return d;
}

void save_split(const SplitDataset& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "#revrec-split\t1\n#seed\t" << s.seed << '\n';
  auto write = [&](const char* name, const std::vector<std::size_t>& rows) {
    out << name;
    for (std::size_t r : rows) out << ' ' << r;
    out << '\n';
  };
  write("train", s.train);
  write("validation", s.validation);
  write("test", s.test);
  if (!out) throw IoError("write failed on " + path.string());
}

SplitDataset load_split(std::shared_ptr<const Dataset> d, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "#revrec-split\t1") {
    throw DataError(path.string() + ": not a version 1 split cache");
  }
  SplitDataset s;
  if (!std::getline(in, line) || !line.starts_with("#seed\t")) {
    throw DataError(path.string() + ": missing seed header");
  }
  s.seed = std::stoull(line.substr(6));
  for (auto* rows : {&s.train, &s.validation, &s.test}) {
    if (!std::getline(in, line)) throw DataError(path.string() + ": truncated split cache");
    std::istringstream is(line);
    std::string name;
    is >> name;
    std::size_t r = 0;
    while (is >> r) {
      if (r >= d->size()) throw DataError(path.string() + ": row index out of range");
      rows->push_back(r);
    }
  }
  s.data = std::move(d);
  return s;
}

}  // namespace revrec
