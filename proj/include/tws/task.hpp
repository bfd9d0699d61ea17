#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tws/model.hpp"

namespace tws {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kFirstContentId = 3;

struct Example {
  std::vector<int> tokens;  // starts with kClsId, no padding
  int label = 0;
};

struct Task {
  std::string name;
  int classes = 2;
  int vocab = 0;
  int seq = 0;  // padded length of every batch
  std::vector<Example> train;
  std::vector<Example> dev;
};

enum class TaskKind { kParity, kMajority, kPattern };
std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct SynthOptions {
  int vocab = 1024;
  int seq = 32;
  std::size_t train = 2000;
  std::size_t dev = 500;
};

// Deterministic synthetic classification tasks with balanced binary labels.
//  parity:   label = parity of the number of marked tokens
//  majority: label = whether "high" tokens outnumber "low" tokens
//  pattern:  label = whether a fixed token bigram occurs
Task synth_task(TaskKind kind, std::uint64_t seed, const SynthOptions& opt = {});

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TsvSchema {
  std::vector<std::string> text_columns;  // one or two sentence columns
  std::string label_column = "label";
  int vocab = 1024;
  int seq = 32;
  int hash_buckets = 64;  // OOV ids share this many hashed slots
  std::string dev_path;   // empty: every fifth row becomes dev
};

// UTF-8 TSV with a header row. Whitespace tokenization; the vocabulary keeps
// the most frequent training tokens (ties broken by byte order) and hashes
// the rest into `hash_buckets` shared ids. Labels map to classes in sorted
// order of their text.
Task ingest_tsv(const std::string& path, const TsvSchema& schema);

// Pads `examples` to `seq` into one batch.
Batch make_batch(std::span<const Example> examples, int seq);

// Shuffled mini-batches of `task.train` for one epoch.
std::vector<Batch> epoch_batches(const Task& task, std::size_t batch_size, std::mt19937_64& rng);
// Sequential batches over `examples`.
std::vector<Batch> eval_batches(std::span<const Example> examples, int seq, std::size_t batch_size = 64);

}  // namespace tws
