#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grab/datagen.hpp"

namespace grab {

// Which field subset an event is expanded with. Partial drops static
// per-user fields; Full keeps every field the candidate carries.
enum class TokenView : std::uint8_t { kPartial = 0, kFull = 1 };

struct SparseId {
  int slot = 0;
  std::uint32_t row = 0;

  auto operator<=>(const SparseId&) const = default;
};

struct FieldSpec {
  std::string name;
  bool in_partial = true;
  bool in_full = true;
  // A required field that is absent and has no default is a schema error;
  // an absent optional field hashes the reserved missing preimage.
  bool required = false;
  std::optional<std::string> default_value;
};

struct FeatureSchema {
  std::vector<FieldSpec> fields;

  // Slot indices participating in a view, in schema order.
  std::vector<int> view_slots(TokenView view) const;
  int arity(TokenView view) const { return static_cast<int>(view_slots(view).size()); }
  void validate() const;

  // Fields emitted by generate_log: user_id and user_group are static and
  // only enter the Full view.
  static FeatureSchema standard();
};

// FNV-1a 64 over "name=value", reduced mod table_rows.
std::uint32_t hash_row(std::string_view name, std::string_view value, std::uint32_t table_rows);
// Missing values hash the bare field name, which no "name=value" preimage
// can produce because names may not contain '='.
std::uint32_t hash_missing_row(std::string_view name, std::uint32_t table_rows);

std::vector<SparseId> expand_event(const Event& e, const FeatureSchema& schema, TokenView view,
                                   std::uint32_t table_rows);

enum class SparseOptimizer : std::uint8_t { kSgd = 0, kAdagrad = 1 };

template <typename T>
struct RowGrad {
  SparseId id;
  std::vector<T> grad;
};

// Embedding table Phi: one table_rows x d_emb block per field slot.
template <typename T>
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(int slots, std::uint32_t rows, int d_emb, std::uint64_t seed,
                 SparseOptimizer opt = SparseOptimizer::kSgd);

  int slots() const { return slots_; }
  std::uint32_t rows() const { return rows_; }
  int dim() const { return d_emb_; }
  std::uint64_t seed() const { return seed_; }
  SparseOptimizer optimizer() const { return opt_; }

  std::span<const T> row(SparseId id) const;
  std::vector<std::vector<T>> lookup(std::span<const SparseId> ids) const;

  // Duplicate ids are summed before the step. Throws kFreezeViolation when
  // frozen (and leaves every row untouched).
  void apply_sparse_grads(std::span<const RowGrad<T>> grads, T lr);

  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }
  bool frozen() const { return frozen_; }

  // FNV-1a over the raw row bytes.
  std::uint64_t checksum() const;

  std::span<const T> data() const { return data_; }
  std::span<const T> adagrad_state() const { return accum_; }

  // Standalone checkpoint: header (magic, version, element size, d_emb,
  // rows per slot, slots, seed, optimizer) then little-endian rows.
  void save(std::ostream& out) const;
  static EmbeddingTable load(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static EmbeddingTable load(const std::filesystem::path& path);

  bool operator==(const EmbeddingTable&) const = default;

 private:
  std::size_t offset(SparseId id) const;

  int slots_ = 0;
  std::uint32_t rows_ = 0;
  int d_emb_ = 0;
  std::uint64_t seed_ = 0;
  SparseOptimizer opt_ = SparseOptimizer::kSgd;
  bool frozen_ = false;
  std::vector<T> data_;
  std::vector<T> accum_;
};

// Uniform(+-1/sqrt(d_emb)) entries seeded per (slot, row), so a row can be
// materialized lazily and match the eager table.
template <typename T>
std::vector<T> init_row(std::uint64_t seed, int slot, std::uint32_t row, int d_emb);

}  // namespace grab
