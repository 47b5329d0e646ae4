#include "digr/gridworld.hpp"

#include <json.hpp>

#include <algorithm>
#include <random>
#include <sstream>
#include <stdexcept>

namespace digr {

namespace {

constexpr int kPx = FetchEnv::kCellPixels;
constexpr int kImg = FetchEnv::kImageSize;

Rgb object_rgb(ObjectColor c) {
  switch (c) {
    case ObjectColor::kGreen:
      return palette::kGreen;
    case ObjectColor::kYellow:
      return palette::kYellow;
    case ObjectColor::kBlue:
      return palette::kBlue;
  }
  return palette::kBlack;
}

void put(Array& img, int y, int x, Rgb c) {
  img[0 * kImg * kImg + y * kImg + x] = c.r;
  img[1 * kImg * kImg + y * kImg + x] = c.g;
  img[2 * kImg * kImg + y * kImg + x] = c.b;
}

void fill_cell(Array& img, Cell cell, Rgb c) {
  auto [y0, x0] = cell_origin(cell);
  for (int y = 0; y < kPx; ++y) {
    for (int x = 0; x < kPx; ++x) put(img, y0 + y, x0 + x, c);
  }
}

// Isosceles triangle with its base on the back edge and apex at the front.
void draw_agent(Array& img, Cell cell, Heading h) {
  auto [y0, x0] = cell_origin(cell);
  for (int y = 0; y < kPx; ++y) {
    for (int x = 0; x < kPx; ++x) {
      double px = x + 0.5, py = y + 0.5;
      double along = 0.0, across = 0.0;
      switch (h) {
        case Heading::kEast:
          along = px, across = py;
          break;
        case Heading::kWest:
          along = kPx - px, across = py;
          break;
        case Heading::kSouth:
          along = py, across = px;
          break;
        case Heading::kNorth:
          along = kPx - py, across = px;
          break;
      }
      if (std::abs(across - kPx / 2.0) <= (kPx - along) / 2.0) put(img, y0 + y, x0 + x, palette::kRed);
    }
  }
}

}  // namespace

bool GridState::operator==(const GridState& o) const {
  if (!(agent == o.agent) || heading != o.heading || carrying != o.carrying || steps != o.steps ||
      done != o.done || cause != o.cause) {
    return false;
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!(objects[i].pos == o.objects[i].pos) || objects[i].color != o.objects[i].color) return false;
  }
  return true;
}

bool FetchEnv::is_wall(Cell c) {
  return c.row <= 0 || c.col <= 0 || c.row >= kGridSize - 1 || c.col >= kGridSize - 1;
}

Cell FetchEnv::front_of(Cell c, Heading h) {
  switch (h) {
    case Heading::kEast:
      return {c.row, c.col + 1};
    case Heading::kSouth:
      return {c.row + 1, c.col};
    case Heading::kWest:
      return {c.row, c.col - 1};
    case Heading::kNorth:
      return {c.row - 1, c.col};
  }
  return c;
}

Tensor FetchEnv::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Cell> interior;
  for (int r = 1; r < kGridSize - 1; ++r) {
    for (int c = 1; c < kGridSize - 1; ++c) interior.push_back({r, c});
  }
  // Partial Fisher-Yates: the first four cells become agent, green, yellow, blue.
  for (std::size_t i = 0; i < 4; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, interior.size() - 1);
    std::swap(interior[i], interior[pick(rng)]);
  }
  state_ = GridState{};
  state_.agent = interior[0];
  state_.heading = static_cast<Heading>(std::uniform_int_distribution<int>(0, 3)(rng));
  state_.objects = {GridObject{interior[1], ObjectColor::kGreen},
                    GridObject{interior[2], ObjectColor::kYellow},
                    GridObject{interior[3], ObjectColor::kBlue}};
  initialized_ = true;
  return observation();
}

StepResult FetchEnv::step(Action action) {
  if (!initialized_) throw std::logic_error("FetchEnv::step before reset");
  if (state_.done) throw std::logic_error("FetchEnv::step on a finished episode");
  StepResult result;
  Cell front = front_of(state_.agent, state_.heading);
  auto object_at = [&](Cell c) -> int {
    for (std::size_t i = 0; i < state_.objects.size(); ++i) {
      if (static_cast<int>(i) != state_.carrying && state_.objects[i].pos == c) {
        return static_cast<int>(i);
      }
    }
    return -1;
  };
  switch (action) {
    case Action::kTurnLeft:
      state_.heading = static_cast<Heading>((static_cast<int>(state_.heading) + 3) % 4);
      break;
    case Action::kTurnRight:
      state_.heading = static_cast<Heading>((static_cast<int>(state_.heading) + 1) % 4);
      break;
    case Action::kForward:
      if (!is_wall(front) && object_at(front) < 0) state_.agent = front;
      break;
    case Action::kPickup: {
      int target = object_at(front);
      if (target >= 0) {
        state_.carrying = target;
        state_.objects[static_cast<std::size_t>(target)].pos = state_.agent;
        state_.done = true;
        if (state_.objects[static_cast<std::size_t>(target)].color == ObjectColor::kGreen) {
          state_.cause = TerminalCause::kSuccess;
          result.reward = 1.0;
        } else {
          state_.cause = TerminalCause::kWrongObject;
        }
      }
      break;
    }
    default:
      throw std::invalid_argument("FetchEnv::step: unknown action");
  }
  ++state_.steps;
  if (!state_.done && state_.steps >= kMaxSteps) {
    state_.done = true;
    state_.cause = TerminalCause::kTimeout;
  }
  result.done = state_.done;
  result.cause = state_.cause;
  result.success = state_.cause == TerminalCause::kSuccess;
  result.observation = observation();
  return result;
}

Tensor FetchEnv::observation() const { return render(state_); }

Tensor render(const GridState& state) {
  Array img = Array::Zero(3 * kImg * kImg);
  for (int r = 0; r < FetchEnv::kGridSize; ++r) {
    for (int c = 0; c < FetchEnv::kGridSize; ++c) {
      if (FetchEnv::is_wall({r, c})) fill_cell(img, {r, c}, palette::kGrey);
    }
  }
  for (std::size_t i = 0; i < state.objects.size(); ++i) {
    if (static_cast<int>(i) == state.carrying) continue;
    fill_cell(img, state.objects[i].pos, object_rgb(state.objects[i].color));
  }
  draw_agent(img, state.agent, state.heading);
  if (state.carrying >= 0) {
    // Carried object: a 2x2 marker in the centre of the agent's cell.
    auto [y0, x0] = cell_origin(state.agent);
    Rgb c = object_rgb(state.objects[static_cast<std::size_t>(state.carrying)].color);
    for (int y = 3; y < 5; ++y) {
      for (int x = 3; x < 5; ++x) put(img, y0 + y, x0 + x, c);
    }
  }
  return Tensor({3, kImg, kImg}, std::move(img));
}

std::string to_string(Action a) {
  switch (a) {
    case Action::kTurnLeft:
      return "turn_left";
    case Action::kTurnRight:
      return "turn_right";
    case Action::kForward:
      return "forward";
    case Action::kPickup:
      return "pickup";
  }
  return "unknown";
}

std::string to_jsonl(const std::vector<EpisodeRecord>& episodes) {
  std::ostringstream os;
  for (const EpisodeRecord& e : episodes) {
    nlohmann::json j;
    j["seed"] = e.seed;
    j["actions"] = e.actions;
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<EpisodeRecord> from_jsonl(const std::string& text) {
  std::vector<EpisodeRecord> out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    EpisodeRecord e;
    try {
      auto j = nlohmann::json::parse(line);
      e = {j.at("seed").get<std::uint64_t>(), j.at("actions").get<std::vector<int>>()};
    } catch (const nlohmann::json::exception& ex) {
      throw std::invalid_argument("episode dump line " + std::to_string(line_no) + ": " + ex.what());
    }
    for (int a : e.actions) {
      if (a < 0 || a >= kNumActions) {
        throw std::invalid_argument("episode dump line " + std::to_string(line_no) + ": action " +
                                    std::to_string(a) + " out of range");
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<GridState> replay(const EpisodeRecord& episode) {
  FetchEnv env;
  env.reset(episode.seed);
  std::vector<GridState> states{env.state()};
  for (int a : episode.actions) {
    env.step(static_cast<Action>(a));
    states.push_back(env.state());
  }
  return states;
}

}  // namespace digr
