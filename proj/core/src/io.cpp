#include "quari/io.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace quari {

namespace {

// Byte-offset-tracking binary reader so format errors can name the exact
// position and expectation.
class BinReader {
 public:
  BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    require(in_.good(), ErrorCategory::io, "cannot open " + path);
  }

  void read(void* dst, std::size_t bytes, const std::string& what) {
    in_.read(reinterpret_cast<char*>(dst), std::streamsize(bytes));
    if (std::size_t(in_.gcount()) != bytes)
      fail(ErrorCategory::format, path_ + ": at byte offset " +
                                      std::to_string(offset_) + ", expected " +
                                      what);
    offset_ += bytes;
  }

  std::uint32_t u32(const std::string& what) {
    std::uint32_t v;
    read(&v, 4, what);
    return v;
  }
  std::uint64_t u64(const std::string& what) {
    std::uint64_t v;
    read(&v, 8, what);
    return v;
  }

  void expect_magic(const char magic[4]) {
    char buf[4];
    read(buf, 4, std::string("magic '") + std::string(magic, 4) + "'");
    if (std::memcmp(buf, magic, 4) != 0)
      fail(ErrorCategory::format,
           path_ + ": at byte offset 0, expected magic '" +
               std::string(magic, 4) + "'");
  }

  std::size_t offset() const { return offset_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

class BinWriter {
 public:
  BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    require(out_.good(), ErrorCategory::io, "cannot open " + path + " for write");
  }
  void write(const void* src, std::size_t bytes) {
    out_.write(reinterpret_cast<const char*>(src), std::streamsize(bytes));
    require(out_.good(), ErrorCategory::io, "short write to " + path_);
  }
  void u32(std::uint32_t v) { write(&v, 4); }
  void u64(std::uint64_t v) { write(&v, 8); }

 private:
  std::string path_;
  std::ofstream out_;
};

constexpr char kQembMagic[4] = {'Q', 'E', 'M', 'B'};
constexpr char kQprsMagic[4] = {'Q', 'P', 'R', 'S'};
constexpr char kQhnwMagic[4] = {'Q', 'H', 'N', 'W'};

struct MmapHolder {
  void* addr = nullptr;
  std::size_t len = 0;
  ~MmapHolder() {
    if (addr) ::munmap(addr, len);
  }
};

}  // namespace

// ---- QEMB -------------------------------------------------------------------

void write_qemb(const std::string& path, std::size_t n, std::size_t e,
                const float* data) {
  BinWriter w(path);
  w.write(kQembMagic, 4);
  w.u32(1);  // version
  w.u32(0);  // dtype f32
  w.u64(n);
  w.u64(e);
  w.write(data, n * e * sizeof(float));
}

EmbeddingFile read_qemb(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kQembMagic);
  const auto version = r.u32("version u32");
  require(version == 1, ErrorCategory::format,
          path + ": unsupported QEMB version " + std::to_string(version));
  const auto dtype = r.u32("dtype u32");
  require(dtype == 0, ErrorCategory::format,
          path + ": unsupported dtype " + std::to_string(dtype));
  EmbeddingFile f;
  f.n = r.u64("N u64");
  f.e = r.u64("E u64");
  f.data.resize(f.n * f.e);
  r.read(f.data.data(), f.data.size() * sizeof(float),
         std::to_string(f.n * f.e) + " f32 values");
  return f;
}

void write_ids(const std::string& path, const std::vector<std::string>& ids) {
  std::ofstream out(path);
  require(out.good(), ErrorCategory::io, "cannot open " + path + " for write");
  for (const auto& id : ids) out << id << '\n';
}

std::vector<std::string> read_ids(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) ids.push_back(line);
  return ids;
}

GalleryIndex load_gallery(const std::string& qemb_path,
                          const std::string& ids_path, bool mmap) {
  auto ids = read_ids(ids_path);
  if (!mmap) {
    EmbeddingFile f = read_qemb(qemb_path);
    require(ids.size() == f.n, ErrorCategory::format,
            ids_path + ": id count != embedding rows");
    return GalleryIndex::own(f.n, f.e, std::move(f.data), std::move(ids));
  }
  const int fd = ::open(qemb_path.c_str(), O_RDONLY);
  require(fd >= 0, ErrorCategory::io, "cannot open " + qemb_path);
  struct stat st{};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    fail(ErrorCategory::io, "fstat failed for " + qemb_path);
  }
  const std::size_t len = std::size_t(st.st_size);
  void* addr = ::mmap(nullptr, len, PROT_READ, MAP_PRIVATE, fd, 0);
  ::close(fd);
  require(addr != MAP_FAILED, ErrorCategory::io, "mmap failed for " + qemb_path);
  auto holder = std::make_shared<MmapHolder>();
  holder->addr = addr;
  holder->len = len;

  constexpr std::size_t kHeader = 4 + 4 + 4 + 8 + 8;
  require(len >= kHeader, ErrorCategory::format,
          qemb_path + ": at byte offset 0, expected QEMB header (28 bytes)");
  const char* base = static_cast<const char*>(addr);
  require(std::memcmp(base, kQembMagic, 4) == 0, ErrorCategory::format,
          qemb_path + ": at byte offset 0, expected magic 'QEMB'");
  std::uint32_t version, dtype;
  std::uint64_t n, e;
  std::memcpy(&version, base + 4, 4);
  std::memcpy(&dtype, base + 8, 4);
  std::memcpy(&n, base + 12, 8);
  std::memcpy(&e, base + 20, 8);
  require(version == 1 && dtype == 0, ErrorCategory::format,
          qemb_path + ": at byte offset 4, expected version 1 / dtype 0");
  require(len >= kHeader + n * e * sizeof(float), ErrorCategory::format,
          qemb_path + ": at byte offset " + std::to_string(kHeader) +
              ", expected " + std::to_string(n * e) + " f32 values");
  require(ids.size() == n, ErrorCategory::format,
          ids_path + ": id count != embedding rows");

  GalleryIndex g;
  g.n = n;
  g.e = e;
  g.data = reinterpret_cast<const float*>(base + kHeader);
  g.holder = holder;
  g.ids = std::move(ids);
  return g;
}

// ---- QPRS -------------------------------------------------------------------

void write_qprs(
    const std::string& path,
    const std::vector<std::pair<std::uint64_t, std::uint64_t>>& pairs) {
  BinWriter w(path);
  w.write(kQprsMagic, 4);
  w.u32(1);
  w.u64(pairs.size());
  for (const auto& [q, t] : pairs) {
    w.u64(q);
    w.u64(t);
  }
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> read_qprs(
    const std::string& path) {
  BinReader r(path);
  r.expect_magic(kQprsMagic);
  const auto version = r.u32("version u32");
  require(version == 1, ErrorCategory::format,
          path + ": unsupported QPRS version " + std::to_string(version));
  const auto count = r.u64("pair count u64");
  std::vector<std::pair<std::uint64_t, std::uint64_t>> pairs(count);
  for (auto& [q, t] : pairs) {
    q = r.u64("query_row u64");
    t = r.u64("target_row u64");
  }
  return pairs;
}

// ---- QHNW checkpoint ----------------------------------------------------------

void save_checkpoint(const std::string& path,
                     const HypernetParams<double>& params) {
  BinWriter w(path);
  w.write(kQhnwMagic, 4);
  w.u32(1);
  const HypernetConfig& c = params.config;
  w.u32(std::uint32_t(c.embed_dim));
  w.u32(std::uint32_t(c.rank));
  w.u32(std::uint32_t(c.model_dim));
  w.u32(std::uint32_t(c.layers));
  w.u32(std::uint32_t(c.heads));
  w.u32(std::uint32_t(c.ffn_dim));
  w.u32(std::uint32_t(c.refine_steps));
  w.u32(c.control_carry ? 1 : 0);
  params.visit([&](const std::string& name, const TensorPtr<double>& t) {
    w.u32(std::uint32_t(name.size()));
    w.write(name.data(), name.size());
    w.u64(t->rows);
    w.u64(t->cols);
    std::vector<float> f32(t->size());
    for (std::size_t i = 0; i < f32.size(); ++i)
      f32[i] = static_cast<float>(t->data[i]);
    w.write(f32.data(), f32.size() * sizeof(float));
  });
}

HypernetParams<double> load_checkpoint(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kQhnwMagic);
  const auto version = r.u32("version u32");
  require(version == 1, ErrorCategory::format,
          path + ": unsupported QHNW version " + std::to_string(version));
  HypernetConfig c;
  c.embed_dim = r.u32("embed_dim u32");
  c.rank = r.u32("rank u32");
  c.model_dim = r.u32("model_dim u32");
  c.layers = r.u32("layers u32");
  c.heads = r.u32("heads u32");
  c.ffn_dim = r.u32("ffn_dim u32");
  c.refine_steps = r.u32("refine_steps u32");
  c.control_carry = r.u32("control_carry u32") != 0;
  c.validate();

  std::mt19937_64 dummy(0);
  HypernetParams<double> params = HypernetParams<double>::init(c, dummy);
  std::map<std::string, TensorPtr<double>> by_name;
  params.visit([&](const std::string& name, const TensorPtr<double>& t) {
    by_name[name] = t;
  });
  std::size_t loaded = 0;
  while (loaded < by_name.size()) {
    const auto name_len = r.u32("tensor name length u32");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "tensor name bytes");
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorCategory::format,
            path + ": unknown tensor '" + name + "'");
    const auto rows = r.u64("rows u64");
    const auto cols = r.u64("cols u64");
    auto& t = *it->second;
    require(rows == t.rows && cols == t.cols, ErrorCategory::format,
            path + ": tensor '" + name + "' has shape " + std::to_string(rows) +
                "x" + std::to_string(cols) + ", config implies " +
                std::to_string(t.rows) + "x" + std::to_string(t.cols));
    std::vector<float> f32(rows * cols);
    r.read(f32.data(), f32.size() * sizeof(float),
           std::to_string(f32.size()) + " f32 values for '" + name + "'");
    for (std::size_t i = 0; i < f32.size(); ++i) t.data[i] = double(f32[i]);
    ++loaded;
  }
  return params;
}

// ---- TSV surfaces ---------------------------------------------------------------

namespace {

std::string format_score(double s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", s);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return out;
}

}  // namespace

std::string format_rankings(const std::vector<RankedList>& lists,
                            const std::vector<std::string>& item_ids) {
  std::string out;
  for (const auto& list : lists) {
    std::size_t rank = 1;
    for (const auto& entry : list.entries) {
      out += list.query_id;
      out += '\t';
      out += std::to_string(rank++);
      out += '\t';
      out += item_ids[entry.row];
      out += '\t';
      out += format_score(entry.score);
      out += '\n';
    }
  }
  return out;
}

void write_rankings(const std::string& path,
                    const std::vector<RankedList>& lists,
                    const std::vector<std::string>& item_ids) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot open " + path + " for write");
  out << format_rankings(lists, item_ids);
}

std::map<std::string, RankedIds> read_rankings(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open " + path);
  std::map<std::string, RankedIds> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    require(cells.size() == 4, ErrorCategory::format,
            path + ":" + std::to_string(lineno) +
                ": expected query_id<TAB>rank<TAB>item_id<TAB>score");
    out[cells[0]].push_back(cells[2]);
  }
  return out;
}

Judgments read_judgments(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open " + path);
  Judgments out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    require(cells.size() == 3, ErrorCategory::format,
            path + ":" + std::to_string(lineno) +
                ": expected query_id<TAB>item_id<TAB>grade");
    try {
      out[cells[0]][cells[1]] = std::stod(cells[2]);
    } catch (const std::exception&) {
      fail(ErrorCategory::format, path + ":" + std::to_string(lineno) +
                                      ": expected numeric grade, got '" +
                                      cells[2] + "'");
    }
  }
  return out;
}

void write_judgments(const std::string& path, const Judgments& judgments) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCategory::io, "cannot open " + path + " for write");
  for (const auto& [qid, items] : judgments)
    for (const auto& [item, grade] : items)
      out << qid << '\t' << item << '\t' << format_score(grade) << '\n';
}

std::map<std::string, std::vector<std::string>> read_candidates(
    const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open " + path);
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    require(cells.size() == 2, ErrorCategory::format,
            path + ":" + std::to_string(lineno) +
                ": expected query_id<TAB>item_id");
    out[cells[0]].push_back(cells[1]);
  }
  return out;
}

std::string format_metric_report(const MetricReport& report) {
  std::ostringstream out;
  out << "metric\tk\tqueries\texcluded\tmean\n";
  for (const auto& [name, mean] : report.means) {
    out << name << '\t' << report.k << '\t' << report.query_count << '\t'
        << report.excluded_count << '\t' << format_score(mean) << '\n';
  }
  return out.str();
}

std::string format_compare(const std::vector<CompareRow>& rows) {
  std::ostringstream out;
  out << "metric\tbaseline\tadapted\tdelta\twins\tlosses\tties\n";
  for (const auto& row : rows) {
    out << row.metric << '\t' << format_score(row.baseline_mean) << '\t'
        << format_score(row.adapted_mean) << '\t' << format_score(row.delta)
        << '\t' << row.wins << '\t' << row.losses << '\t' << row.ties << '\n';
  }
  return out.str();
}

// ---- run config -------------------------------------------------------------------

namespace {

const std::map<std::string, std::string>& default_config() {
  static const std::map<std::string, std::string> defaults = {
      {"rank", "64"},          {"model_dim", "256"},
      {"layers", "4"},         {"heads", "4"},
      {"refine_steps", "4"},   {"batch", "320"},
      {"tau", "0.07"},         {"lr_max", "1e-5"},
      {"lr_min", "2e-7"},      {"weight_decay", "1e-2"},
      {"seed", "0"},           {"epochs", "1"},
      {"noise_mode", "elementwise"}, {"loss_norm", "true"},
  };
  return defaults;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  cfg.values_ = default_config();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    require(eq != std::string::npos, ErrorCategory::config,
            "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    require(default_config().count(key) > 0, ErrorCategory::config,
            "config line " + std::to_string(lineno) + ": unknown key '" + key +
                "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCategory::io, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
  return out;
}

std::size_t RunConfig::get_count(const std::string& key) const {
  const std::string& v = values_.at(key);
  try {
    const long long parsed = std::stoll(v);
    require(parsed >= 0, ErrorCategory::config, key + " must be >= 0");
    return std::size_t(parsed);
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(ErrorCategory::config, "config key '" + key + "': expected integer, got '" + v + "'");
  }
}

double RunConfig::get_real(const std::string& key) const {
  const std::string& v = values_.at(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    fail(ErrorCategory::config, "config key '" + key + "': expected number, got '" + v + "'");
  }
}

std::uint64_t RunConfig::seed() const {
  const std::string& v = values_.at("seed");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    fail(ErrorCategory::config, "config key 'seed': expected u64, got '" + v + "'");
  }
}

bool RunConfig::loss_norm() const {
  const std::string& v = values_.at("loss_norm");
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCategory::config, "config key 'loss_norm': expected true/false");
}

HypernetConfig RunConfig::hypernet_config(std::size_t embed_dim) const {
  HypernetConfig c;
  c.embed_dim = embed_dim;
  c.rank = rank();
  c.model_dim = model_dim();
  c.layers = layers();
  c.heads = heads();
  c.ffn_dim = 4 * c.model_dim;
  c.refine_steps = refine_steps();
  c.validate();
  return c;
}

}  // namespace quari
