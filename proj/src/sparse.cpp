#include "grab/sparse.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "grab/binio.hpp"
#include "grab/error.hpp"
#include "grab/hash.hpp"
#include "grab/rng.hpp"

namespace grab {

namespace {
constexpr char kTableMagic[8] = {'G', 'R', 'A', 'B', 'P', 'H', 'I', '1'};
constexpr std::uint32_t kTableVersion = 1;
}  // namespace

std::vector<int> FeatureSchema::view_slots(TokenView view) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(fields.size()); ++i) {
    const auto& f = fields[i];
    if (view == TokenView::kPartial ? f.in_partial : f.in_full) out.push_back(i);
  }
  return out;
}

void FeatureSchema::validate() const {
  if (fields.empty()) fail(ErrorKind::kSchema, "schema has no fields");
  for (const auto& f : fields) {
    if (f.name.empty()) fail(ErrorKind::kSchema, "schema field with empty name");
    if (f.name.find('=') != std::string::npos)
      fail(ErrorKind::kSchema, "field name '" + f.name + "' contains '='");
  }
  if (view_slots(TokenView::kPartial).empty())
    fail(ErrorKind::kSchema, "partial view has no fields");
  if (view_slots(TokenView::kFull).empty()) fail(ErrorKind::kSchema, "full view has no fields");
}

FeatureSchema FeatureSchema::standard() {
  FeatureSchema s;
  s.fields = {
      {field::kUserId, false, true, true, std::nullopt},
      {field::kUserGroup, false, true, false, std::nullopt},
      {field::kCategory, true, true, true, std::nullopt},
      {field::kItemId, true, true, true, std::nullopt},
      {field::kHour, true, true, false, std::nullopt},
  };
  return s;
}

std::uint32_t hash_row(std::string_view name, std::string_view value, std::uint32_t table_rows) {
  std::uint64_t h = fnv1a64(name);
  h = fnv1a64("=", h);
  h = fnv1a64(value, h);
  return static_cast<std::uint32_t>(h % table_rows);
}

std::uint32_t hash_missing_row(std::string_view name, std::uint32_t table_rows) {
  return static_cast<std::uint32_t>(fnv1a64(name) % table_rows);
}

std::vector<SparseId> expand_event(const Event& e, const FeatureSchema& schema, TokenView view,
                                   std::uint32_t table_rows) {
  std::vector<SparseId> out;
  for (int slot : schema.view_slots(view)) {
    const FieldSpec& f = schema.fields[slot];
    auto it = e.fields.find(f.name);
    std::uint32_t row;
    if (it != e.fields.end()) {
      row = hash_row(f.name, it->second, table_rows);
    } else if (f.default_value) {
      row = hash_row(f.name, *f.default_value, table_rows);
    } else if (f.required) {
      fail(ErrorKind::kSchema, "event of user " + std::to_string(e.user_id) +
                                   " is missing required field '" + f.name + "'");
    } else {
      row = hash_missing_row(f.name, table_rows);
    }
    out.push_back({slot, row});
  }
  return out;
}

template <typename T>
std::vector<T> init_row(std::uint64_t seed, int slot, std::uint32_t row, int d_emb) {
  Rng rng(derive_seed({seed, 0xE3B0ULL, static_cast<std::uint64_t>(slot), row}));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_emb));
  std::vector<T> v(d_emb);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

template <typename T>
EmbeddingTable<T>::EmbeddingTable(int slots, std::uint32_t rows, int d_emb, std::uint64_t seed,
                                  SparseOptimizer opt)
    : slots_(slots), rows_(rows), d_emb_(d_emb), seed_(seed), opt_(opt) {
  require(slots > 0 && rows > 0 && d_emb > 0, ErrorKind::kConfig,
          "embedding table needs positive slots, rows and d_emb");
  data_.resize(static_cast<std::size_t>(slots) * rows * d_emb);
  for (int s = 0; s < slots; ++s) {
    for (std::uint32_t r = 0; r < rows; ++r) {
      const auto v = init_row<T>(seed, s, r, d_emb);
      std::copy(v.begin(), v.end(), data_.begin() + offset({s, r}));
    }
  }
  if (opt_ == SparseOptimizer::kAdagrad) accum_.assign(data_.size(), T(0));
}

template <typename T>
std::size_t EmbeddingTable<T>::offset(SparseId id) const {
  if (id.slot < 0 || id.slot >= slots_ || id.row >= rows_)
    fail(ErrorKind::kIndex, "sparse id (" + std::to_string(id.slot) + ", " +
                                std::to_string(id.row) + ") out of range");
  return (static_cast<std::size_t>(id.slot) * rows_ + id.row) * d_emb_;
}

template <typename T>
std::span<const T> EmbeddingTable<T>::row(SparseId id) const {
  return std::span<const T>(data_).subspan(offset(id), d_emb_);
}

template <typename T>
std::vector<std::vector<T>> EmbeddingTable<T>::lookup(std::span<const SparseId> ids) const {
  std::vector<std::vector<T>> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto r = row(id);
    out.emplace_back(r.begin(), r.end());
  }
  return out;
}

template <typename T>
void EmbeddingTable<T>::apply_sparse_grads(std::span<const RowGrad<T>> grads, T lr) {
  if (frozen_) fail(ErrorKind::kFreezeViolation, "apply_sparse_grads on a frozen embedding table");
  std::map<SparseId, std::vector<T>> summed;
  for (const auto& g : grads) {
    if (static_cast<int>(g.grad.size()) != d_emb_)
      fail(ErrorKind::kShape, "sparse gradient width " + std::to_string(g.grad.size()) +
                                  " != d_emb " + std::to_string(d_emb_));
    offset(g.id);
    auto [it, inserted] = summed.try_emplace(g.id, g.grad);
    if (!inserted)
      for (int k = 0; k < d_emb_; ++k) it->second[k] += g.grad[k];
  }
  for (const auto& [id, g] : summed) {
    const std::size_t base = offset(id);
    if (opt_ == SparseOptimizer::kAdagrad) {
      for (int k = 0; k < d_emb_; ++k) {
        accum_[base + k] += g[k] * g[k];
        data_[base + k] -= lr * g[k] / (std::sqrt(accum_[base + k]) + T(1e-8));
      }
    } else {
      for (int k = 0; k < d_emb_; ++k) data_[base + k] -= lr * g[k];
    }
  }
}

template <typename T>
std::uint64_t EmbeddingTable<T>::checksum() const {
  return fnv1a64_bytes(std::as_bytes(std::span<const T>(data_)));
}

template <typename T>
void EmbeddingTable<T>::save(std::ostream& out) const {
  out.write(kTableMagic, sizeof(kTableMagic));
  binio::put<std::uint32_t>(out, kTableVersion);
  binio::put<std::uint32_t>(out, sizeof(T));
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(d_emb_));
  binio::put<std::uint32_t>(out, rows_);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(slots_));
  binio::put<std::uint64_t>(out, seed_);
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(opt_));
  binio::put<std::uint8_t>(out, frozen_ ? 1 : 0);
  binio::put_array(out, data_.data(), data_.size());
  binio::put<std::uint64_t>(out, accum_.size());
  binio::put_array(out, accum_.data(), accum_.size());
}

template <typename T>
EmbeddingTable<T> EmbeddingTable<T>::load(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTableMagic, sizeof(magic)) != 0)
    fail(ErrorKind::kIo, "embedding table: bad magic");
  const auto version = binio::get<std::uint32_t>(in, "table version");
  if (version != kTableVersion)
    fail(ErrorKind::kIo, "embedding table: unsupported version " + std::to_string(version));
  const auto elem = binio::get<std::uint32_t>(in, "table element size");
  if (elem != sizeof(T))
    fail(ErrorKind::kIo, "embedding table: element size " + std::to_string(elem) +
                             " does not match requested precision");
  EmbeddingTable t;
  t.d_emb_ = static_cast<int>(binio::get<std::uint32_t>(in, "d_emb"));
  t.rows_ = binio::get<std::uint32_t>(in, "rows");
  t.slots_ = static_cast<int>(binio::get<std::uint32_t>(in, "slots"));
  t.seed_ = binio::get<std::uint64_t>(in, "seed");
  const auto opt = binio::get<std::uint8_t>(in, "optimizer");
  if (opt > 1) fail(ErrorKind::kIo, "embedding table: unknown optimizer code");
  t.opt_ = static_cast<SparseOptimizer>(opt);
  t.frozen_ = binio::get<std::uint8_t>(in, "frozen") != 0;
  if (t.d_emb_ <= 0 || t.rows_ == 0 || t.slots_ <= 0 || t.d_emb_ > 4096 || t.slots_ > 4096)
    fail(ErrorKind::kIo, "embedding table: implausible header");
  t.data_.resize(static_cast<std::size_t>(t.slots_) * t.rows_ * t.d_emb_);
  binio::get_array(in, t.data_.data(), t.data_.size(), "table rows");
  const auto n_accum = binio::get<std::uint64_t>(in, "adagrad size");
  if (n_accum != 0 && n_accum != t.data_.size())
    fail(ErrorKind::kIo, "embedding table: adagrad state size mismatch");
  t.accum_.resize(n_accum);
  binio::get_array(in, t.accum_.data(), t.accum_.size(), "adagrad state");
  return t;
}

template <typename T>
void EmbeddingTable<T>::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  save(out);
}

template <typename T>
EmbeddingTable<T> EmbeddingTable<T>::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return load(in);
}

template class EmbeddingTable<float>;
template class EmbeddingTable<double>;
template std::vector<float> init_row<float>(std::uint64_t, int, std::uint32_t, int);
template std::vector<double> init_row<double>(std::uint64_t, int, std::uint32_t, int);

}  // namespace grab
