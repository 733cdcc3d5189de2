#pragma once

// Click-log data model, ingestion, vocabulary, splitting, batching and a
// position-based-model session generator with known ground truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fetcm/error.hpp"
#include "fetcm/rng.hpp"

namespace fetcm {

inline constexpr int kDefaultMaxPositions = 10;

struct DocumentImpression {
  std::int64_t url_id = 0;
  int position = 0;  // 1-based rank
  int click = 0;
  bool operator==(const DocumentImpression&) const = default;
};

struct QueryRecord {
  std::int64_t query_id = 0;
  std::vector<DocumentImpression> docs;  // sorted by position
  bool operator==(const QueryRecord&) const = default;
};

struct Session {
  std::int64_t session_id = 0;
  std::vector<QueryRecord> queries;
  bool operator==(const Session&) const = default;
};

struct LogStats {
  std::size_t sessions = 0;
  std::size_t queries = 0;
  std::size_t docs = 0;
};

inline LogStats count(const std::vector<Session>& sessions) {
  LogStats s;
  s.sessions = sessions.size();
  for (const auto& session : sessions) {
    s.queries += session.queries.size();
    for (const auto& q : session.queries) s.docs += q.docs.size();
  }
  return s;
}

// Sorts each query's documents by position and checks every invariant of the
// data model. Throws ValidationError.
inline void normalize_session(Session& session, int max_positions = kDefaultMaxPositions) {
  const std::string where = "session " + std::to_string(session.session_id);
  if (session.session_id < 0) throw ValidationError(where + ": negative session_id");
  if (session.queries.empty()) throw ValidationError(where + ": no queries");
  for (auto& q : session.queries) {
    if (q.query_id < 0) throw ValidationError(where + ": negative query_id");
    if (q.docs.empty()) throw ValidationError(where + ": query " + std::to_string(q.query_id) + " has no docs");
    if (q.docs.size() > static_cast<std::size_t>(max_positions))
      throw ValidationError(where + ": query " + std::to_string(q.query_id) + " has " +
                            std::to_string(q.docs.size()) + " docs, more than " + std::to_string(max_positions));
    for (const auto& d : q.docs) {
      if (d.url_id < 0) throw ValidationError(where + ": negative url_id");
      if (d.position < 1 || d.position > max_positions)
        throw ValidationError(where + ": pos " + std::to_string(d.position) + " outside [1, " +
                              std::to_string(max_positions) + "]");
      if (d.click != 0 && d.click != 1)
        throw ValidationError(where + ": click must be 0 or 1, got " + std::to_string(d.click));
    }
    std::stable_sort(q.docs.begin(), q.docs.end(),
                     [](const auto& a, const auto& b) { return a.position < b.position; });
    for (std::size_t j = 0; j < q.docs.size(); ++j) {
      if (j > 0 && q.docs[j].position == q.docs[j - 1].position)
        throw ValidationError(where + ": duplicate pos " + std::to_string(q.docs[j].position) + " in query " +
                              std::to_string(q.query_id));
      if (q.docs[j].position != static_cast<int>(j + 1))
        throw ValidationError(where + ": pos values of query " + std::to_string(q.query_id) +
                              " must be 1.." + std::to_string(q.docs.size()));
    }
  }
}

// ---------------------------------------------------------------------------
// Canonical JSON-lines format

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(line, std::string("missing key \"") + key + "\"");
  return *it;
}

inline std::int64_t int_field(const nlohmann::json& obj, const char* key, std::size_t line) {
  const auto& v = field(obj, key, line);
  if (!v.is_number_integer()) throw ParseError(line, std::string("\"") + key + "\" must be an integer");
  return v.get<std::int64_t>();
}

inline const nlohmann::json& array_field(const nlohmann::json& obj, const char* key, std::size_t line) {
  const auto& v = field(obj, key, line);
  if (!v.is_array()) throw ParseError(line, std::string("\"") + key + "\" must be an array");
  return v;
}

inline void only_keys(const nlohmann::json& obj, std::initializer_list<const char*> keys, std::size_t line) {
  if (!obj.is_object()) throw ParseError(line, "expected a JSON object");
  for (const auto& [k, v] : obj.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* allowed) { return k == allowed; }))
      throw ParseError(line, "unexpected key \"" + k + "\"");
  }
}

inline int small_int(std::int64_t v, const char* key, std::size_t line) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ValidationError("line " + std::to_string(line) + ": " + key + " out of range");
  return static_cast<int>(v);
}

}  // namespace detail

inline Session parse_canonical_line(const std::string& text, std::size_t line,
                                    int max_positions = kDefaultMaxPositions) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
  detail::only_keys(j, {"session_id", "queries"}, line);
  Session s;
  s.session_id = detail::int_field(j, "session_id", line);
  for (const auto& jq : detail::array_field(j, "queries", line)) {
    detail::only_keys(jq, {"query_id", "docs"}, line);
    QueryRecord q;
    q.query_id = detail::int_field(jq, "query_id", line);
    for (const auto& jd : detail::array_field(jq, "docs", line)) {
      detail::only_keys(jd, {"url_id", "pos", "click"}, line);
      DocumentImpression d;
      d.url_id = detail::int_field(jd, "url_id", line);
      d.position = detail::small_int(detail::int_field(jd, "pos", line), "pos", line);
      d.click = detail::small_int(detail::int_field(jd, "click", line), "click", line);
      q.docs.push_back(d);
    }
    s.queries.push_back(std::move(q));
  }
  try {
    normalize_session(s, max_positions);
  } catch (const ValidationError& e) {
    throw ValidationError("line " + std::to_string(line) + ": " + e.what());
  }
  return s;
}

inline std::vector<Session> parse_canonical(std::istream& in, int max_positions = kDefaultMaxPositions) {
  std::vector<Session> sessions;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) throw ParseError(line, "empty line");
    sessions.push_back(parse_canonical_line(text, line, max_positions));
  }
  return sessions;
}

inline void write_canonical(std::ostream& out, const Session& s) {
  out << "{\"session_id\":" << s.session_id << ",\"queries\":[";
  for (std::size_t i = 0; i < s.queries.size(); ++i) {
    const auto& q = s.queries[i];
    if (i) out << ',';
    out << "{\"query_id\":" << q.query_id << ",\"docs\":[";
    for (std::size_t j = 0; j < q.docs.size(); ++j) {
      const auto& d = q.docs[j];
      if (j) out << ',';
      out << "{\"url_id\":" << d.url_id << ",\"pos\":" << d.position << ",\"click\":" << d.click << '}';
    }
    out << "]}";
  }
  out << "]}\n";
}

inline void write_canonical(std::ostream& out, const std::vector<Session>& sessions) {
  for (const auto& s : sessions) write_canonical(out, s);
}

inline std::vector<Session> read_canonical_file(const std::string& path,
                                                int max_positions = kDefaultMaxPositions) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return parse_canonical(in, max_positions);
}

inline void write_canonical_file(const std::string& path, const std::vector<Session>& sessions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_canonical(out, sessions);
  if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Yandex challenge logs
//
//   SessionID  M  Day  UserID
//   SessionID  Time  Q|T  SERPID  QueryID  Terms  URL,Domain x N
//   SessionID  Time  C  SERPID  URLID

struct YandexLog {
  std::vector<Session> sessions;
  std::size_t warnings = 0;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

inline std::int64_t parse_id(const std::string& s, std::size_t line, const char* what) {
  std::int64_t v = 0;
  std::size_t used = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || v < 0)
    throw ParseError(line, std::string("bad ") + what + " \"" + s + "\"");
  return v;
}

}  // namespace detail

inline YandexLog parse_yandex(std::istream& in, int max_positions = kDefaultMaxPositions) {
  struct Serp {
    std::int64_t serp_id;
    std::int64_t time;
    std::size_t order;
    QueryRecord query;
  };
  struct Pending {
    std::int64_t session_id;
    std::vector<Serp> serps;
  };
  std::vector<Pending> pending;
  std::unordered_map<std::int64_t, std::size_t> by_id;
  YandexLog log;
  auto session_for = [&](std::int64_t id) -> Pending& {
    auto [it, inserted] = by_id.try_emplace(id, pending.size());
    if (inserted) pending.push_back({id, {}});
    return pending[it->second];
  };

  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    const auto f = detail::split_tabs(text);
    if (f.size() < 3) throw ParseError(line, "too few fields");
    const std::int64_t sid = detail::parse_id(f[0], line, "SessionID");
    if (f[1] == "M") {
      if (f.size() != 4) throw ParseError(line, "metadata record needs 4 fields");
      session_for(sid);
      continue;
    }
    const std::int64_t time = detail::parse_id(f[1], line, "time");
    const std::string& type = f[2];
    if (type == "Q" || type == "T") {
      if (f.size() < 7) throw ParseError(line, "query record needs at least one URL");
      const std::size_t n_urls = f.size() - 6;
      if (n_urls > static_cast<std::size_t>(max_positions))
        throw ParseError(line, "query record lists " + std::to_string(n_urls) + " URLs");
      Serp serp{detail::parse_id(f[3], line, "SERPID"), time, 0, {}};
      serp.query.query_id = detail::parse_id(f[4], line, "QueryID");
      for (std::size_t k = 0; k < n_urls; ++k) {
        const std::string& pair = f[6 + k];
        const auto comma = pair.find(',');
        if (comma == std::string::npos) throw ParseError(line, "URL field \"" + pair + "\" lacks a domain");
        detail::parse_id(pair.substr(comma + 1), line, "DomainID");
        serp.query.docs.push_back({detail::parse_id(pair.substr(0, comma), line, "URLID"),
                                   static_cast<int>(k + 1), 0});
      }
      auto& s = session_for(sid);
      serp.order = s.serps.size();
      s.serps.push_back(std::move(serp));
    } else if (type == "C") {
      if (f.size() != 5) throw ParseError(line, "click record needs 5 fields");
      const std::int64_t serp_id = detail::parse_id(f[3], line, "SERPID");
      const std::int64_t url = detail::parse_id(f[4], line, "URLID");
      auto& s = session_for(sid);
      if (s.serps.empty()) {
        ++log.warnings;
        continue;
      }
      bool matched = false;
      for (auto& serp : s.serps) {
        if (serp.serp_id != serp_id) continue;
        for (auto& d : serp.query.docs)
          if (d.url_id == url) {
            d.click = 1;
            matched = true;
            break;
          }
        if (matched) break;
      }
      if (!matched) ++log.warnings;
    } else {
      throw ParseError(line, "unknown record type \"" + type + "\"");
    }
  }

  for (auto& p : pending) {
    if (p.serps.empty()) {
      ++log.warnings;
      continue;
    }
    std::stable_sort(p.serps.begin(), p.serps.end(), [](const Serp& a, const Serp& b) {
      return a.time != b.time ? a.time < b.time : a.order < b.order;
    });
    Session s{p.session_id, {}};
    for (auto& serp : p.serps) s.queries.push_back(std::move(serp.query));
    normalize_session(s, max_positions);
    log.sessions.push_back(std::move(s));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::int64_t kPaddingIndex = 0;
inline constexpr std::int64_t kUnknownIndex = 1;

class IdMap {
 public:
  IdMap() = default;
  explicit IdMap(std::vector<std::int64_t> raw_ids) {
    for (auto id : raw_ids) add(id);
  }

  void add(std::int64_t raw) {
    if (index_.try_emplace(raw, static_cast<std::int64_t>(raw_.size()) + 2).second) raw_.push_back(raw);
  }
  std::int64_t lookup(std::int64_t raw) const {
    auto it = index_.find(raw);
    return it == index_.end() ? kUnknownIndex : it->second;
  }
  bool contains(std::int64_t raw) const { return index_.count(raw) > 0; }
  // Table size including the padding and unknown rows.
  std::size_t size() const { return raw_.size() + 2; }
  const std::vector<std::int64_t>& raw_ids() const { return raw_; }

 private:
  std::unordered_map<std::int64_t, std::int64_t> index_;
  std::vector<std::int64_t> raw_;
};

struct Vocabulary {
  IdMap queries;
  IdMap urls;
};

// Ids are numbered in order of first appearance among those kept.
inline Vocabulary build_vocab(const std::vector<Session>& sessions, int min_freq = 1) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1, got " + std::to_string(min_freq));
  std::unordered_map<std::int64_t, int> qf, uf;
  std::vector<std::int64_t> q_order, u_order;
  for (const auto& s : sessions)
    for (const auto& q : s.queries) {
      if (qf[q.query_id]++ == 0) q_order.push_back(q.query_id);
      for (const auto& d : q.docs)
        if (uf[d.url_id]++ == 0) u_order.push_back(d.url_id);
    }
  Vocabulary v;
  for (auto id : q_order)
    if (qf[id] >= min_freq) v.queries.add(id);
  for (auto id : u_order)
    if (uf[id] >= min_freq) v.urls.add(id);
  return v;
}

// ---------------------------------------------------------------------------
// Splitting

struct DataSplit {
  std::vector<Session> train, valid, test;
};

inline DataSplit split(const std::vector<Session>& sessions, std::array<double, 3> ratios,
                       std::uint64_t seed) {
  const std::size_t n = sessions.size();
  if (n < 3) throw ConfigError("split needs at least 3 sessions, got " + std::to_string(n));
  for (double r : ratios)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("split ratios must lie in [0, 1]");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");
  auto part = [&](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  const std::size_t n_valid = part(ratios[1]), n_test = part(ratios[2]);
  const std::size_t n_train = n - n_valid - n_test;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(seed, "split");
  shuffle(order.begin(), order.end(), rng);
  DataSplit out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : i < n_train + n_valid ? out.valid : out.test;
    dst.push_back(sessions[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Padded batches
//
// One batch holds whole sessions. Queries are laid out session by session and
// padded to `max_positions` slots; slot (i, j) lives at index i*max_positions+j.

struct Batch {
  std::size_t max_positions = 0;
  std::vector<std::size_t> sessions;       // indices into the source list
  std::vector<std::size_t> session_begin;  // first query of each session, plus an end sentinel
  std::vector<std::int64_t> query;         // dense query index per query
  std::vector<std::int64_t> url;           // dense url index per slot, 0 for padding
  std::vector<std::int64_t> position;      // 1-based rank per slot, 0 for padding
  std::vector<double> click;               // label per slot, 0 for padding
  std::vector<std::uint8_t> mask;          // 1 for real documents

  std::size_t query_count() const { return query.size(); }
  std::size_t session_count() const { return sessions.size(); }
  std::size_t doc_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

inline Batch make_batch(const std::vector<Session>& sessions, const std::vector<std::size_t>& members,
                        const Vocabulary& vocab, std::size_t max_positions) {
  Batch b;
  b.max_positions = max_positions;
  b.sessions = members;
  for (std::size_t idx : members) {
    b.session_begin.push_back(b.query.size());
    for (const auto& q : sessions[idx].queries) {
      if (q.docs.size() > max_positions)
        throw ValidationError("query " + std::to_string(q.query_id) + " has more than " +
                              std::to_string(max_positions) + " docs");
      b.query.push_back(vocab.queries.lookup(q.query_id));
      for (std::size_t j = 0; j < max_positions; ++j) {
        const bool real = j < q.docs.size();
        b.url.push_back(real ? vocab.urls.lookup(q.docs[j].url_id) : kPaddingIndex);
        b.position.push_back(real ? q.docs[j].position : 0);
        b.click.push_back(real ? q.docs[j].click : 0.0);
        b.mask.push_back(real ? 1 : 0);
      }
    }
  }
  b.session_begin.push_back(b.query.size());
  return b;
}

// Walks a session list in batches of whole sessions. With shuffle on, the
// session order is a seeded permutation; nothing else changes.
class BatchStream {
 public:
  BatchStream(const std::vector<Session>& sessions, const Vocabulary& vocab, std::size_t batch_size,
              std::size_t max_positions, std::uint64_t seed, bool shuffle_sessions)
      : sessions_(&sessions), vocab_(&vocab), batch_size_(batch_size), max_positions_(max_positions) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    order_.resize(sessions.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle_sessions) {
      Rng rng = make_rng(seed, "batches");
      shuffle(order_.begin(), order_.end(), rng);
    }
  }

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    std::vector<std::size_t> members(order_.begin() + cursor_, order_.begin() + end);
    cursor_ = end;
    return make_batch(*sessions_, members, *vocab_, max_positions_);
  }

  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

 private:
  const std::vector<Session>* sessions_;
  const Vocabulary* vocab_;
  std::size_t batch_size_, max_positions_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline std::vector<Batch> batch_iter(const std::vector<Session>& sessions, const Vocabulary& vocab,
                                     std::size_t batch_size, std::size_t max_positions,
                                     std::uint64_t seed, bool shuffle_sessions) {
  BatchStream stream(sessions, vocab, batch_size, max_positions, seed, shuffle_sessions);
  std::vector<Batch> out;
  while (auto b = stream.next()) out.push_back(std::move(*b));
  return out;
}

// ---------------------------------------------------------------------------
// Position-based model ground truth

struct GroundTruth {
  std::map<std::pair<std::int64_t, std::int64_t>, double> alpha;  // (query, url) -> attractiveness
  std::vector<double> gamma;                                       // gamma[r-1] for rank r
  std::map<std::int64_t, std::vector<std::int64_t>> candidates;    // urls listed for each query

  double click_probability(std::int64_t query, std::int64_t url, int position) const {
    auto it = alpha.find({query, url});
    if (it == alpha.end())
      throw GenerationError("no alpha for query " + std::to_string(query) + ", url " + std::to_string(url));
    if (position < 1 || static_cast<std::size_t>(position) > gamma.size())
      throw GenerationError("no gamma for rank " + std::to_string(position));
    return it->second * gamma[position - 1];
  }
};

// gamma = 1.0, 0.9, ... for `ranks` ranks, stepping down by 0.1 but not
// below 0.1.
inline std::vector<double> linear_gamma(std::size_t ranks) {
  std::vector<double> g(ranks);
  for (std::size_t r = 0; r < ranks; ++r) g[r] = std::max(0.1, 1.0 - 0.1 * static_cast<double>(r));
  return g;
}

struct PbmSpec {
  std::size_t query_ids = 200;
  std::size_t url_ids = 1000;
  std::size_t docs_per_query = 10;
  double alpha_low = 0.1;
  double alpha_high = 0.9;
  std::vector<double> gamma = linear_gamma(10);
};

// Each query gets a fixed candidate list of `docs_per_query` distinct urls and
// an alpha ~ Uniform(alpha_low, alpha_high) per (query, url) pair.
inline GroundTruth make_pbm_truth(const PbmSpec& spec, std::uint64_t seed) {
  if (spec.query_ids == 0) throw GenerationError("query_ids must be positive");
  if (spec.docs_per_query == 0 || spec.docs_per_query > spec.url_ids)
    throw GenerationError("docs_per_query must lie in [1, url_ids]");
  if (!(0.0 <= spec.alpha_low && spec.alpha_low <= spec.alpha_high && spec.alpha_high <= 1.0))
    throw GenerationError("alpha range must satisfy 0 <= low <= high <= 1");
  for (double g : spec.gamma)
    if (!(g >= 0.0 && g <= 1.0)) throw GenerationError("gamma values must lie in [0, 1]");
  Rng rng = make_rng(seed, "pbm-truth");
  GroundTruth truth;
  truth.gamma = spec.gamma;
  std::vector<std::int64_t> urls(spec.url_ids);
  for (std::size_t u = 0; u < spec.url_ids; ++u) urls[u] = static_cast<std::int64_t>(u);
  for (std::size_t q = 0; q < spec.query_ids; ++q) {
    // Partial Fisher-Yates draws distinct urls.
    for (std::size_t k = 0; k < spec.docs_per_query; ++k) {
      const std::size_t j = k + uniform_index(rng, spec.url_ids - k);
      std::swap(urls[k], urls[j]);
    }
    auto& list = truth.candidates[static_cast<std::int64_t>(q)];
    for (std::size_t k = 0; k < spec.docs_per_query; ++k) {
      list.push_back(urls[k]);
      truth.alpha[{static_cast<std::int64_t>(q), urls[k]}] = uniform(rng, spec.alpha_low, spec.alpha_high);
    }
  }
  return truth;
}

// Sessions of `queries_per_session` queries drawn uniformly from the truth's
// queries. Each impression shows `docs_per_query` of the query's candidates in
// a fresh random order, and click ~ Bernoulli(alpha * gamma[rank]).
inline std::vector<Session> synthesize_pbm(const GroundTruth& truth, std::size_t n_sessions,
                                           std::size_t queries_per_session, std::size_t docs_per_query,
                                           std::uint64_t seed) {
  if (truth.gamma.size() < docs_per_query)
    throw GenerationError("gamma has " + std::to_string(truth.gamma.size()) + " ranks, need " +
                          std::to_string(docs_per_query));
  if (n_sessions > 0 && (queries_per_session == 0 || docs_per_query == 0))
    throw GenerationError("sessions need at least one query and one doc");
  if (n_sessions > 0 && truth.candidates.empty()) throw GenerationError("ground truth lists no queries");
  std::vector<const std::pair<const std::int64_t, std::vector<std::int64_t>>*> queries;
  for (const auto& entry : truth.candidates) {
    if (n_sessions > 0 && entry.second.size() < docs_per_query)
      throw GenerationError("query " + std::to_string(entry.first) + " has only " +
                            std::to_string(entry.second.size()) + " candidates");
    queries.push_back(&entry);
  }
  Rng rng = make_rng(seed, "pbm-sessions");
  std::vector<Session> sessions;
  sessions.reserve(n_sessions);
  std::vector<std::int64_t> shown;
  for (std::size_t s = 0; s < n_sessions; ++s) {
    Session session{static_cast<std::int64_t>(s), {}};
    for (std::size_t qi = 0; qi < queries_per_session; ++qi) {
      const auto& [query, cands] = *queries[uniform_index(rng, queries.size())];
      shown = cands;
      shuffle(shown.begin(), shown.end(), rng);
      QueryRecord rec{query, {}};
      for (std::size_t j = 0; j < docs_per_query; ++j) {
        const int pos = static_cast<int>(j + 1);
        const double p = truth.click_probability(query, shown[j], pos);
        rec.docs.push_back({shown[j], pos, uniform01(rng) < p ? 1 : 0});
      }
      session.queries.push_back(std::move(rec));
    }
    sessions.push_back(std::move(session));
  }
  return sessions;
}

// Truth sidecar: a `q,u,alpha` section followed by a `rank,gamma` section.
// Values are written with 17 significant digits so they read back exactly.
inline void write_truth_csv(std::ostream& out, const GroundTruth& truth) {
  const auto old_precision = out.precision(17);
  out << "q,u,alpha\n";
  for (const auto& [q, urls] : truth.candidates)
    for (auto u : urls) out << q << ',' << u << ',' << truth.alpha.at({q, u}) << '\n';
  out << "rank,gamma\n";
  for (std::size_t r = 0; r < truth.gamma.size(); ++r) out << r + 1 << ',' << truth.gamma[r] << '\n';
  out.precision(old_precision);
}

inline GroundTruth read_truth_csv(std::istream& in) {
  GroundTruth truth;
  std::string text;
  std::size_t line = 0;
  int section = 0;
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (s.empty() || used != s.size()) throw ParseError(line, "bad number \"" + s + "\"");
    return v;
  };
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    if (text == "q,u,alpha") {
      section = 1;
      continue;
    }
    if (text == "rank,gamma") {
      section = 2;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(text);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (section == 1 && f.size() == 3) {
      const auto q = detail::parse_id(f[0], line, "query id");
      const auto u = detail::parse_id(f[1], line, "url id");
      const double a = number(f[2]);
      if (!(a >= 0.0 && a <= 1.0)) throw ParseError(line, "alpha outside [0, 1]");
      if (!truth.alpha.emplace(std::make_pair(q, u), a).second) throw ParseError(line, "duplicate (q,u) pair");
      truth.candidates[q].push_back(u);
    } else if (section == 2 && f.size() == 2) {
      const auto r = detail::parse_id(f[0], line, "rank");
      if (r != static_cast<std::int64_t>(truth.gamma.size()) + 1) throw ParseError(line, "ranks must be 1, 2, ...");
      const double g = number(f[1]);
      if (!(g >= 0.0 && g <= 1.0)) throw ParseError(line, "gamma outside [0, 1]");
      truth.gamma.push_back(g);
    } else {
      throw ParseError(line, "unexpected row \"" + text + "\"");
    }
  }
  return truth;
}

}  // namespace fetcm
