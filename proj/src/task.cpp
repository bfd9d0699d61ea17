#include "tws/task.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace tws {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kParity: return "parity";
    case TaskKind::kMajority: return "majority";
    case TaskKind::kPattern: return "pattern";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "parity") return TaskKind::kParity;
  if (s == "majority") return TaskKind::kMajority;
  if (s == "pattern") return TaskKind::kPattern;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Parity: the first eighth of the content ids are marked. Sequences hold
// one to four marked tokens.
Example parity_example(int label, int vocab, int seq, std::mt19937_64& rng) {
  const int content = vocab - kFirstContentId;
  const int marked = std::max(1, content / 8);
  const int len = uniform_int(rng, seq / 2, seq - 1);
  int count = uniform_int(rng, 1, 4);
  if (count % 2 != label) count += count == 4 ? -1 : 1;
  Example ex;
  ex.label = label;
  ex.tokens.push_back(kClsId);
  std::vector<int> body(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    body[i] = i < count ? kFirstContentId + uniform_int(rng, 0, marked - 1)
                        : kFirstContentId + uniform_int(rng, marked, content - 1);
  }
  std::shuffle(body.begin(), body.end(), rng);
  ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
  return ex;
}

// Majority: ids below the midpoint are "low", the rest "high". The high
// share is drawn away from one half so the vote is never tied.
Example majority_example(int label, int vocab, int seq, std::mt19937_64& rng) {
  const int content = vocab - kFirstContentId;
  const int mid = content / 2;
  int len = uniform_int(rng, seq / 2, seq - 1);
  if (len % 2 == 0) --len;
  const int margin = uniform_int(rng, 1, std::max(1, len / 3));
  const int half = len / 2;
  const int high = label == 1 ? half + margin : half + 1 - margin;
  Example ex;
  ex.label = label;
  ex.tokens.push_back(kClsId);
  std::vector<int> body(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    body[i] = i < high ? kFirstContentId + uniform_int(rng, mid, content - 1)
                       : kFirstContentId + uniform_int(rng, 0, mid - 1);
  }
  std::shuffle(body.begin(), body.end(), rng);
  ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
  return ex;
}

// Pattern: positives contain the bigram (x, y); negatives contain x and y
// separately or reversed but never adjacent in order.
Example pattern_example(int label, int vocab, int seq, std::mt19937_64& rng) {
  const int x = kFirstContentId;
  const int y = kFirstContentId + 1;
  const int len = uniform_int(rng, seq / 2, seq - 1);
  std::vector<int> body(static_cast<std::size_t>(len));
  for (auto& t : body) t = uniform_int(rng, kFirstContentId + 2, vocab - 1);
  const int at = uniform_int(rng, 0, len - 2);
  if (label == 1) {
    body[at] = x;
    body[at + 1] = y;
  } else if (uniform_int(rng, 0, 1) == 0) {
    body[at] = y;
    body[at + 1] = x;
  } else {
    int other = uniform_int(rng, 0, len - 1);
    while (other == at + 1 || other == at) other = uniform_int(rng, 0, len - 1);
    body[at] = x;
    body[other] = y;
    if (other + 1 < len && body[other + 1] == y) body[other + 1] = kFirstContentId + 2;
  }
  Example ex;
  ex.label = label;
  ex.tokens.push_back(kClsId);
  ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
  return ex;
}

}  // namespace

Task synth_task(TaskKind kind, std::uint64_t seed, const SynthOptions& opt) {
  if (opt.vocab < 16) throw std::invalid_argument("synth_task: vocab must be >= 16");
  if (opt.seq < 8) throw std::invalid_argument("synth_task: seq must be >= 8");
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(kind) + 1);
  Task task;
  task.name = to_string(kind);
  task.classes = 2;
  task.vocab = opt.vocab;
  task.seq = opt.seq;
  auto gen = [&](std::size_t count) {
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % 2);
    std::shuffle(labels.begin(), labels.end(), rng);
    std::vector<Example> out;
    out.reserve(count);
    for (int label : labels) {
      switch (kind) {
        case TaskKind::kParity: out.push_back(parity_example(label, opt.vocab, opt.seq, rng)); break;
        case TaskKind::kMajority: out.push_back(majority_example(label, opt.vocab, opt.seq, rng)); break;
        case TaskKind::kPattern: out.push_back(pattern_example(label, opt.vocab, opt.seq, rng)); break;
      }
    }
    return out;
  };
  task.train = gen(opt.train);
  task.dev = gen(opt.dev);
  return task;
}

// ---------------------------------------------------------------------------
// TSV

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
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

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::uint32_t fnv1a(const std::string& s) {
  std::uint32_t h = 2166136261u;
  for (unsigned char c : s) {
    h ^= c;
    h *= 16777619u;
  }
  return h;
}

struct Row {
  std::vector<std::vector<std::string>> texts;
  std::string label;
};

std::vector<Row> read_rows(const std::string& path, const TsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_tabs(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path + ": header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> text_cols;
  for (const auto& c : schema.text_columns) text_cols.push_back(column(c));
  const std::size_t label_col = column(schema.label_column);
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != header.size()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
    }
    Row r;
    for (auto c : text_cols) r.texts.push_back(split_ws(fields[c]));
    r.label = fields[label_col];
    if (r.label.empty()) throw DataError(path + ":" + std::to_string(line_no) + ": empty label");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError(path + ": no data rows");
  return rows;
}

}  // namespace

Task ingest_tsv(const std::string& path, const TsvSchema& schema) {
  if (schema.text_columns.empty() || schema.text_columns.size() > 2) {
    throw std::invalid_argument("ingest_tsv: need one or two text columns");
  }
  if (schema.hash_buckets < 1 || schema.vocab < kFirstContentId + schema.hash_buckets + 1) {
    throw std::invalid_argument("ingest_tsv: vocabulary too small for the hash buckets");
  }
  if (schema.seq < 2) throw std::invalid_argument("ingest_tsv: seq must be >= 2");
  std::vector<Row> rows = read_rows(path, schema);
  std::vector<Row> dev_rows;
  if (!schema.dev_path.empty()) {
    dev_rows = read_rows(schema.dev_path, schema);
  } else {
    std::vector<Row> keep;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      (i % 5 == 4 ? dev_rows : keep).push_back(std::move(rows[i]));
    }
    rows = std::move(keep);
  }

  std::map<std::string, std::size_t> freq;
  for (const auto& r : rows) {
    for (const auto& words : r.texts) {
      for (const auto& w : words) ++freq[w];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t capacity =
      static_cast<std::size_t>(schema.vocab - kFirstContentId - schema.hash_buckets);
  if (ranked.size() > capacity) ranked.resize(capacity);
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < ranked.size(); ++i) ids[ranked[i].first] = kFirstContentId + static_cast<int>(i);
  const int bucket_base = kFirstContentId + static_cast<int>(capacity);

  std::set<std::string> label_set;
  for (const auto& r : rows) label_set.insert(r.label);
  for (const auto& r : dev_rows) label_set.insert(r.label);
  std::map<std::string, int> label_ids;
  for (const auto& l : label_set) label_ids[l] = static_cast<int>(label_ids.size());

  auto encode = [&](const Row& r) {
    Example ex;
    ex.label = label_ids.at(r.label);
    ex.tokens.push_back(kClsId);
    for (std::size_t c = 0; c < r.texts.size(); ++c) {
      if (c > 0) ex.tokens.push_back(kSepId);
      for (const auto& w : r.texts[c]) {
        const auto it = ids.find(w);
        ex.tokens.push_back(it != ids.end()
                                ? it->second
                                : bucket_base + static_cast<int>(fnv1a(w) % static_cast<std::uint32_t>(schema.hash_buckets)));
      }
    }
    if (ex.tokens.size() > static_cast<std::size_t>(schema.seq)) ex.tokens.resize(static_cast<std::size_t>(schema.seq));
    return ex;
  };

  Task task;
  task.name = path;
  task.classes = std::max<int>(1, static_cast<int>(label_ids.size()));
  task.vocab = schema.vocab;
  task.seq = schema.seq;
  for (const auto& r : rows) task.train.push_back(encode(r));
  for (const auto& r : dev_rows) task.dev.push_back(encode(r));
  return task;
}

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(std::span<const Example> examples, int seq) {
  Batch b;
  b.size = examples.size();
  b.seq = static_cast<std::size_t>(seq);
  b.tokens.assign(b.size * b.seq, kPadId);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& toks = examples[i].tokens;
    if (toks.empty() || toks.size() > b.seq) throw ShapeError("make_batch: example length out of range");
    std::copy(toks.begin(), toks.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
    b.lengths.push_back(toks.size());
    b.labels.push_back(examples[i].label);
  }
  return b;
}

std::vector<Batch> epoch_batches(const Task& task, std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  std::vector<Example> chunk;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    chunk.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      chunk.push_back(task.train[order[i]]);
    }
    out.push_back(make_batch(chunk, task.seq));
  }
  return out;
}

std::vector<Batch> eval_batches(std::span<const Example> examples, int seq, std::size_t batch_size) {
  std::vector<Batch> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    out.push_back(make_batch(examples.subspan(start, std::min(batch_size, examples.size() - start)), seq));
  }
  return out;
}

}  // namespace tws
