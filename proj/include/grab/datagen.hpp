#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace grab {

enum class Action : std::uint8_t { kExposure = 0, kClick = 1, kLike = 2, kSkip = 3 };

inline constexpr int kNumActions = 4;

std::string_view to_string(Action a);
// Throws ErrorKind::kParse on unknown names.
Action parse_action(std::string_view name);

// One user behavior (history) or candidate (scored exposure) record.
struct Event {
  std::uint64_t user_id = 0;
  std::int64_t ts = 0;
  Action action = Action::kExposure;
  int channel = 0;
  std::map<std::string, std::string> fields;
  // Set only on candidates.
  std::optional<int> label;
  bool is_candidate = false;

  bool operator==(const Event&) const = default;
};

// Field names emitted by the generator.
namespace field {
inline constexpr const char* kUserId = "user_id";
inline constexpr const char* kUserGroup = "user_group";
inline constexpr const char* kCategory = "category";
inline constexpr const char* kItemId = "item_id";
inline constexpr const char* kHour = "hour";
}  // namespace field

struct GenConfig {
  std::uint64_t n_users = 1000;
  std::pair<int, int> events_per_user_range{10, 40};
  int n_candidates_per_user = 10;
  double base_click_rate = 0.1;
  // Weight of the recency-weighted similarity between a candidate and the
  // user's clicked history.
  double recency_boost = 0.0;
  // Weight of log(1 + #same-category clicks in history).
  double action_affinity_boost = 0.0;
  // Weight of the per-user-group bias (visible only through static fields).
  double static_boost = 0.0;
  int n_channels = 1;
  // Recency half-life (seconds) of clicked history, per source channel;
  // cycled when shorter than n_channels.
  std::vector<double> channel_half_lives{3600.0};
  std::map<std::string, int> field_vocab_sizes{
      {field::kCategory, 32}, {field::kItemId, 2048}, {field::kUserGroup, 16}};
  double session_gap_mean = 6.0 * 3600.0;
  double intra_session_gap_mean = 60.0;
  double session_length_mean = 6.0;
  std::uint64_t seed = 1;

  // Throws ErrorKind::kConfig naming the offending field.
  void validate() const;
};

inline constexpr int kLatentDim = 8;

// Deterministic in cfg. Per-user streams derive from (seed, user_id), so the
// result is identical for any thread count.
std::vector<Event> generate_log(const GenConfig& cfg, int threads = 1);

std::string to_json_line(const Event& e);
// line_no is 1-based and only used for error messages.
Event parse_json_line(std::string_view line, std::size_t line_no);

void write_log(std::span<const Event> events, const std::filesystem::path& path);
std::vector<Event> read_log(const std::filesystem::path& path);

}  // namespace grab
