#include <cstring>
#include <fstream>
#include <map>

#include "grab/binio.hpp"
#include "grab/error.hpp"
#include "grab/sts.hpp"

namespace grab {

using num::Mat;
using num::Parameter;

namespace {

constexpr char kMagic[8] = {'G', 'R', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_opt_i64(std::ostream& out, const std::optional<std::int64_t>& v) {
  binio::put<std::uint8_t>(out, v ? 1 : 0);
  binio::put<std::int64_t>(out, v.value_or(0));
}

std::optional<std::int64_t> get_opt_i64(std::istream& in, const char* what) {
  const auto has = binio::get<std::uint8_t>(in, what);
  const auto v = binio::get<std::int64_t>(in, what);
  if (!has) return std::nullopt;
  return v;
}

void put_config(std::ostream& out, const ModelConfig& c) {
  for (int v : {c.n_layer, c.n_head, c.d_model, c.n_channels, c.buckets.n_pos, c.buckets.n_act,
                c.buckets.n_time, c.d_ffn, c.d_emb, c.sparse_hidden})
    binio::put<std::int32_t>(out, v);
  std::optional<std::int64_t> len;
  if (c.window.length) len = *c.window.length;
  put_opt_i64(out, len);
  put_opt_i64(out, c.window.time);
  binio::put<std::uint32_t>(out, c.table_rows);
  for (std::uint8_t v :
       {static_cast<std::uint8_t>(c.precision), static_cast<std::uint8_t>(c.rab_path),
        static_cast<std::uint8_t>(c.sparse_optimizer), static_cast<std::uint8_t>(c.rel_pos),
        static_cast<std::uint8_t>(c.rel_time), static_cast<std::uint8_t>(c.rel_action),
        static_cast<std::uint8_t>(c.target_mix), static_cast<std::uint8_t>(c.token_mode)})
    binio::put<std::uint8_t>(out, v);
  binio::put<std::uint64_t>(out, c.seed);
}

ModelConfig get_config(std::istream& in) {
  ModelConfig c;
  for (int* v : {&c.n_layer, &c.n_head, &c.d_model, &c.n_channels, &c.buckets.n_pos,
                 &c.buckets.n_act, &c.buckets.n_time, &c.d_ffn, &c.d_emb, &c.sparse_hidden})
    *v = binio::get<std::int32_t>(in, "model config");
  const auto len = get_opt_i64(in, "model config");
  c.window.length = len ? std::optional<int>(static_cast<int>(*len)) : std::nullopt;
  c.window.time = get_opt_i64(in, "model config");
  c.table_rows = binio::get<std::uint32_t>(in, "model config");
  std::uint8_t f[8];
  for (auto& v : f) v = binio::get<std::uint8_t>(in, "model config");
  c.precision = static_cast<num::Precision>(f[0]);
  c.rab_path = static_cast<RabPath>(f[1]);
  c.sparse_optimizer = static_cast<SparseOptimizer>(f[2]);
  c.rel_pos = f[3] != 0;
  c.rel_time = f[4] != 0;
  c.rel_action = f[5] != 0;
  c.target_mix = f[6] != 0;
  c.token_mode = static_cast<TokenMode>(f[7]);
  c.seed = binio::get<std::uint64_t>(in, "model config");
  return c;
}

template <typename T>
void put_mat(std::ostream& out, const Mat<T>& m) {
  binio::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  binio::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  binio::put_array(out, m.data(), static_cast<std::size_t>(m.size()));
}

template <typename T>
Mat<T> get_mat(std::istream& in, const char* what) {
  const auto r = binio::get<std::uint64_t>(in, what);
  const auto c = binio::get<std::uint64_t>(in, what);
  if (r > (1u << 26) || c > (1u << 26) || r * c > (1ull << 28))
    fail(ErrorKind::kIo, std::string("implausible matrix shape in ") + what);
  Mat<T> m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  binio::get_array(in, m.data(), static_cast<std::size_t>(m.size()), what);
  return m;
}

template <typename T>
void put_adam(std::ostream& out, const AdamState<T>& s) {
  binio::put<std::int64_t>(out, s.t);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.m.size()));
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    put_mat(out, s.m[i]);
    put_mat(out, s.v[i]);
  }
}

template <typename T>
AdamState<T> get_adam(std::istream& in, const std::vector<Parameter<T>*>& params,
                      const char* what) {
  AdamState<T> s;
  s.t = binio::get<std::int64_t>(in, what);
  const auto n = binio::get<std::uint32_t>(in, what);
  if (n != 0 && n != params.size())
    fail(ErrorKind::kShape, std::string(what) + ": state covers " + std::to_string(n) +
                                " blocks, model has " + std::to_string(params.size()));
  for (std::uint32_t i = 0; i < n; ++i) {
    s.m.push_back(get_mat<T>(in, what));
    s.v.push_back(get_mat<T>(in, what));
    const auto& p = params[i]->value;
    if (s.m.back().rows() != p.rows() || s.m.back().cols() != p.cols() ||
        s.v.back().rows() != p.rows() || s.v.back().cols() != p.cols())
      fail(ErrorKind::kShape, std::string(what) + ": state of block '" + params[i]->name +
                                  "' does not match its shape");
  }
  return s;
}

template <typename T>
std::vector<Parameter<T>*> all_blocks(ModelParams<T>& p) {
  auto out = p.dense_parameters();
  for (auto* q : p.sparse_head.parameters()) out.push_back(q);
  return out;
}

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
TrainState<T> read_state(std::istream& in, const ModelConfig* expected) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    fail(ErrorKind::kIo, "checkpoint: bad magic (not a checkpoint file)");
  const auto version = binio::get<std::uint32_t>(in, "checkpoint version");
  if (version != kVersion)
    fail(ErrorKind::kIo, "checkpoint: unsupported version " + std::to_string(version));
  const auto elem = binio::get<std::uint32_t>(in, "checkpoint element size");
  if (elem != sizeof(T))
    fail(ErrorKind::kIo, "checkpoint: stored element size " + std::to_string(elem) +
                             " does not match requested precision");
  const ModelConfig stored = get_config(in);
  TrainState<T> st;
  st.params = ModelParams<T>::init(expected ? *expected : stored);
  auto blocks = all_blocks(st.params);
  std::map<std::string, Parameter<T>*> by_name;
  for (auto* b : blocks) by_name[b->name] = b;

  const auto n_blocks = binio::get<std::uint32_t>(in, "block count");
  std::size_t matched = 0;
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    const std::string name = binio::get_string(in, "block name");
    Mat<T> m = get_mat<T>(in, name.c_str());
    auto it = by_name.find(name);
    if (it == by_name.end())
      fail(ErrorKind::kShape, "checkpoint block '" + name + "' has no counterpart in the model");
    Parameter<T>& p = *it->second;
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      fail(ErrorKind::kShape, "checkpoint block '" + name + "' is " + shape_str(m.rows(), m.cols()) +
                                  ", model expects " + shape_str(p.value.rows(), p.value.cols()));
    p.value = std::move(m);
    p.zero_grad();
    ++matched;
  }
  if (matched != blocks.size())
    fail(ErrorKind::kShape, "checkpoint holds " + std::to_string(matched) + " blocks, model has " +
                                std::to_string(blocks.size()));
  st.dense_opt = get_adam<T>(in, st.params.dense_parameters(), "dense optimizer");
  st.sparse_head_opt = get_adam<T>(in, st.params.sparse_head.parameters(), "f_sp optimizer");
  st.epoch = binio::get<std::int32_t>(in, "epoch");
  st.step = binio::get<std::int64_t>(in, "step");
  st.params.dense_frozen = binio::get<std::uint8_t>(in, "freeze flag") != 0;
  EmbeddingTable<T> table = EmbeddingTable<T>::load(in);
  const auto& want = st.params.table;
  if (table.dim() != want.dim() || table.rows() != want.rows() || table.slots() != want.slots())
    fail(ErrorKind::kShape, "checkpoint block 'table' is " + std::to_string(table.slots()) + "x" +
                                std::to_string(table.rows()) + "x" + std::to_string(table.dim()) +
                                ", model expects " + std::to_string(want.slots()) + "x" +
                                std::to_string(want.rows()) + "x" + std::to_string(want.dim()));
  st.params.table = std::move(table);
  st.params.cfg = expected ? *expected : stored;
  return st;
}

}  // namespace

template <typename T>
void save_checkpoint(std::ostream& out, const TrainState<T>& st) {
  out.write(kMagic, sizeof kMagic);
  binio::put<std::uint32_t>(out, kVersion);
  binio::put<std::uint32_t>(out, sizeof(T));
  put_config(out, st.params.cfg);
  auto& params = const_cast<ModelParams<T>&>(st.params);
  const auto blocks = all_blocks(params);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto* b : blocks) {
    binio::put_string(out, b->name);
    put_mat(out, b->value);
  }
  put_adam(out, st.dense_opt);
  put_adam(out, st.sparse_head_opt);
  binio::put<std::int32_t>(out, st.epoch);
  binio::put<std::int64_t>(out, st.step);
  binio::put<std::uint8_t>(out, st.params.dense_frozen ? 1 : 0);
  st.params.table.save(out);
  if (!out) fail(ErrorKind::kIo, "checkpoint: write failed");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& st) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  save_checkpoint(out, st);
}

template <typename T>
TrainState<T> load_checkpoint(std::istream& in) {
  return read_state<T>(in, nullptr);
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return read_state<T>(in, nullptr);
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return read_state<T>(in, &expected);
}

num::Precision checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    fail(ErrorKind::kIo, "checkpoint: bad magic (not a checkpoint file)");
  binio::get<std::uint32_t>(in, "checkpoint version");
  const auto elem = binio::get<std::uint32_t>(in, "checkpoint element size");
  return elem == sizeof(float) ? num::Precision::kSingle : num::Precision::kDouble;
}

#define GRAB_INSTANTIATE(T)                                                                  \
  template void save_checkpoint<T>(std::ostream&, const TrainState<T>&);                      \
  template void save_checkpoint<T>(const std::filesystem::path&, const TrainState<T>&);       \
  template TrainState<T> load_checkpoint<T>(std::istream&);                                  \
  template TrainState<T> load_checkpoint<T>(const std::filesystem::path&);                   \
  template TrainState<T> load_checkpoint<T>(const std::filesystem::path&, const ModelConfig&);

GRAB_INSTANTIATE(float)
GRAB_INSTANTIATE(double)

#undef GRAB_INSTANTIATE

}  // namespace grab
