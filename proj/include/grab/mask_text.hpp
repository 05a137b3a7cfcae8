#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "grab/packing.hpp"

namespace grab {

// Text layout description, one "key = values" line per field:
//   seg = A A B          segment labels, contiguous runs (required)
//   local = 1 2 1        optional, must match the run positions
//   kind = P P F         P(artial) or F(ull), default all P
//   ts = 0 10 20         default all 0
//   window_length = 2    or none (default)
//   window_time = 60     or none (default)
// Values may be separated by spaces or commas; '#' starts a comment.
struct LayoutSpec {
  Layout layout;
  WindowSpec window;
};

// Malformed input is a kConfig error citing the line.
LayoutSpec parse_layout_spec(std::string_view text);

using NamedMask = std::pair<std::string, num::MaskMat>;

// causal, het, window and model (their conjunction), in that order.
std::vector<NamedMask> layout_masks(const LayoutSpec& spec);

// Layout summary followed by one "mask <name> <n>" block per mask; rows use
// '1' for visible and '.' for blocked.
std::string format_mask_grids(const LayoutSpec& spec);
// Reads back the mask blocks of format_mask_grids; kParse on bad grids.
std::vector<NamedMask> parse_mask_grids(std::string_view text);

}  // namespace grab
