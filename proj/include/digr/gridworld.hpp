#pragma once

#include "digr/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace digr {

// Red-Fetch-Green: an 8x8 room (walls on the border) holding a red agent, a
// green target and yellow/blue distractors. Picking up the target ends the
// episode with reward 1; picking up a distractor or running out of steps
// ends it with reward 0.

inline constexpr char kFetchEnvId[] = "RedFetchGreen-8x8-v0";

enum class Action : int { kTurnLeft = 0, kTurnRight = 1, kForward = 2, kPickup = 3 };
inline constexpr int kNumActions = 4;

enum class Heading : int { kEast = 0, kSouth = 1, kWest = 2, kNorth = 3 };

enum class ObjectColor : int { kGreen = 0, kYellow = 1, kBlue = 2 };

enum class TerminalCause : int { kNone = 0, kSuccess, kWrongObject, kTimeout };

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

struct GridObject {
  Cell pos;
  ObjectColor color = ObjectColor::kGreen;
};

struct GridState {
  Cell agent;
  Heading heading = Heading::kEast;
  std::array<GridObject, 3> objects;  // index 0 is the green target
  int carrying = -1;                  // index into objects, or -1
  int steps = 0;
  bool done = false;
  TerminalCause cause = TerminalCause::kNone;
  bool operator==(const GridState&) const;
};

struct StepResult {
  Tensor observation;  // [3, 64, 64]
  double reward = 0.0;
  bool done = false;
  bool success = false;
  TerminalCause cause = TerminalCause::kNone;
};

struct Rgb {
  double r, g, b;
};

namespace palette {
inline constexpr Rgb kRed{1.0, 0.0, 0.0};
inline constexpr Rgb kGreen{0.0, 1.0, 0.0};
inline constexpr Rgb kYellow{1.0, 1.0, 0.0};
inline constexpr Rgb kBlue{0.0, 0.0, 1.0};
inline constexpr Rgb kGrey{0.5, 0.5, 0.5};
inline constexpr Rgb kBlack{0.0, 0.0, 0.0};
}  // namespace palette

class FetchEnv {
 public:
  static constexpr int kGridSize = 8;
  static constexpr int kCellPixels = 8;
  static constexpr int kImageSize = kGridSize * kCellPixels;
  static constexpr int kMaxSteps = 256;

  /// Places the entities uniformly on distinct interior cells.
  Tensor reset(std::uint64_t seed);
  /// Throws std::logic_error once the episode is done.
  StepResult step(Action action);

  const GridState& state() const { return state_; }
  /// Replaces the state wholesale; used to replay stored states.
  void set_state(const GridState& state) { state_ = state; }
  Tensor observation() const;

  static bool is_wall(Cell c);
  static Cell front_of(Cell c, Heading h);

 private:
  GridState state_;
  bool initialized_ = false;
};

/// [3, 64, 64] image of the state in the fixed palette.
Tensor render(const GridState& state);

/// First pixel (row, col) of a cell's 8x8 block.
inline std::array<int, 2> cell_origin(Cell c) {
  return {c.row * FetchEnv::kCellPixels, c.col * FetchEnv::kCellPixels};
}

std::string to_string(Action a);

/// One replayable episode: reset seed plus the actions taken.
struct EpisodeRecord {
  std::uint64_t seed = 0;
  std::vector<int> actions;
};

std::string to_jsonl(const std::vector<EpisodeRecord>& episodes);
std::vector<EpisodeRecord> from_jsonl(const std::string& text);
/// Replays an episode and returns the visited states (including the final one).
std::vector<GridState> replay(const EpisodeRecord& episode);

}  // namespace digr
