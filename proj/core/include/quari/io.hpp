#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "quari/eval.hpp"
#include "quari/hypernet.hpp"
#include "quari/retrieval.hpp"

namespace quari {

// ---- QEMB: embedding matrix ------------------------------------------------
// magic "QEMB", version u32 = 1, dtype u32 (0 = f32), N u64, E u64,
// then N*E little-endian f32, row-major. Companion ".ids" file holds one
// UTF-8 id per line, line i <-> row i.

struct EmbeddingFile {
  std::size_t n = 0;
  std::size_t e = 0;
  std::vector<float> data;
};

void write_qemb(const std::string& path, std::size_t n, std::size_t e,
                const float* data);
EmbeddingFile read_qemb(const std::string& path);

void write_ids(const std::string& path, const std::vector<std::string>& ids);
std::vector<std::string> read_ids(const std::string& path);

// Loads a gallery; with mmap=true the embedding block stays file-backed.
GalleryIndex load_gallery(const std::string& qemb_path,
                          const std::string& ids_path, bool mmap = true);

// ---- QPRS: training pairs ----------------------------------------------------
// magic "QPRS", version u32, u64 count, then (query_row u64, target_row u64).

void write_qprs(const std::string& path,
                const std::vector<std::pair<std::uint64_t, std::uint64_t>>& p);
std::vector<std::pair<std::uint64_t, std::uint64_t>> read_qprs(
    const std::string& path);

// ---- QHNW: hypernetwork checkpoint -------------------------------------------
// magic "QHNW", version u32, serialized HypernetConfig, then each parameter
// tensor as (name length u32, name bytes, rows u64, cols u64, LE f32 data).

void save_checkpoint(const std::string& path,
                     const HypernetParams<double>& params);
HypernetParams<double> load_checkpoint(const std::string& path);

// ---- TSV surfaces ------------------------------------------------------------

// `query_id<TAB>rank<TAB>item_id<TAB>score`, score at 6 significant digits.
std::string format_rankings(const std::vector<RankedList>& lists,
                            const std::vector<std::string>& item_ids);
void write_rankings(const std::string& path,
                    const std::vector<RankedList>& lists,
                    const std::vector<std::string>& item_ids);
std::map<std::string, RankedIds> read_rankings(const std::string& path);

// `query_id<TAB>item_id<TAB>grade`
Judgments read_judgments(const std::string& path);
void write_judgments(const std::string& path, const Judgments& judgments);

// `query_id<TAB>item_id`
std::map<std::string, std::vector<std::string>> read_candidates(
    const std::string& path);

std::string format_metric_report(const MetricReport& report);
std::string format_compare(const std::vector<CompareRow>& rows);

// ---- run config ----------------------------------------------------------------
// Line-oriented `key = value` UTF-8 text. Unknown keys are rejected; missing
// keys take the documented defaults.

class RunConfig {
 public:
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  // Canonical form: every known key with its effective value, sorted order.
  std::string serialize() const;

  std::size_t rank() const { return get_count("rank"); }
  std::size_t model_dim() const { return get_count("model_dim"); }
  std::size_t layers() const { return get_count("layers"); }
  std::size_t heads() const { return get_count("heads"); }
  std::size_t refine_steps() const { return get_count("refine_steps"); }
  std::size_t batch() const { return get_count("batch"); }
  std::size_t epochs() const { return get_count("epochs"); }
  std::uint64_t seed() const;
  double tau() const { return get_real("tau"); }
  double lr_max() const { return get_real("lr_max"); }
  double lr_min() const { return get_real("lr_min"); }
  double weight_decay() const { return get_real("weight_decay"); }
  std::string noise_mode() const { return values_.at("noise_mode"); }
  bool loss_norm() const;

  HypernetConfig hypernet_config(std::size_t embed_dim) const;

 private:
  std::size_t get_count(const std::string& key) const;
  double get_real(const std::string& key) const;
  std::map<std::string, std::string> values_;
};

}  // namespace quari
