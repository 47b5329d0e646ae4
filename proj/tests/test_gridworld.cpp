#include "digr/gridworld.hpp"

#include <doctest.h>

#include <set>
#include <tuple>

using namespace digr;

namespace {

GridState fixed_state() {
  GridState s;
  s.agent = {3, 3};
  s.heading = Heading::kEast;
  s.objects = {GridObject{{3, 4}, ObjectColor::kGreen}, GridObject{{5, 5}, ObjectColor::kYellow},
               GridObject{{2, 6}, ObjectColor::kBlue}};
  return s;
}

FetchEnv env_at(const GridState& s) {
  FetchEnv env;
  env.reset(0);
  env.set_state(s);
  return env;
}

std::tuple<double, double, double> pixel(const Tensor& obs, int y, int x) {
  const int n = FetchEnv::kImageSize * FetchEnv::kImageSize;
  const int i = y * FetchEnv::kImageSize + x;
  return {obs[i], obs[n + i], obs[2 * n + i]};
}

}  // namespace

TEST_SUITE("trivial") {
  TEST_CASE("same seed gives bit-identical observations") {
    FetchEnv a, b;
    Tensor oa = a.reset(42), ob = b.reset(42);
    CHECK((oa.array() - ob.array()).abs().maxCoeff() == 0.0);
    CHECK(a.state() == b.state());
    CHECK(oa.shape() == Shape{3, 64, 64});
  }

  TEST_CASE("entities never share a spawn cell") {
    FetchEnv env;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      env.reset(seed);
      const GridState& s = env.state();
      std::set<std::pair<int, int>> cells{{s.agent.row, s.agent.col}};
      for (const GridObject& o : s.objects) {
        CHECK_FALSE(FetchEnv::is_wall(o.pos));
        cells.insert({o.pos.row, o.pos.col});
      }
      CHECK(cells.size() == 4);
      CHECK_FALSE(FetchEnv::is_wall(s.agent));
    }
  }

  TEST_CASE("renderer uses only palette colors") {
    FetchEnv env;
    const std::set<std::tuple<double, double, double>> palette_set = {
        {1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {0, 0, 1}, {0.5, 0.5, 0.5}, {0, 0, 0}};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor obs = env.reset(seed);
      for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) CHECK(palette_set.count(pixel(obs, y, x)) == 1);
      }
    }
  }

  TEST_CASE("target cell block is pure green") {
    Tensor obs = render(fixed_state());
    auto [y0, x0] = cell_origin({3, 4});
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) CHECK(pixel(obs, y0 + y, x0 + x) == std::make_tuple(0.0, 1.0, 0.0));
    }
  }

  TEST_CASE("forward into a wall leaves the agent in place") {
    GridState s = fixed_state();
    s.agent = {1, 1};
    s.heading = Heading::kWest;
    FetchEnv env = env_at(s);
    StepResult r = env.step(Action::kForward);
    CHECK(env.state().agent == Cell{1, 1});
    CHECK_FALSE(r.done);
    CHECK(r.reward == 0.0);
  }

  TEST_CASE("forward into an object is blocked") {
    FetchEnv env = env_at(fixed_state());
    env.step(Action::kForward);
    CHECK(env.state().agent == Cell{3, 3});
  }

  TEST_CASE("turns rotate the heading") {
    FetchEnv env = env_at(fixed_state());
    env.step(Action::kTurnRight);
    CHECK(env.state().heading == Heading::kSouth);
    env.step(Action::kTurnLeft);
    env.step(Action::kTurnLeft);
    CHECK(env.state().heading == Heading::kNorth);
  }

  TEST_CASE("256 turns time out with reward 0") {
    FetchEnv env = env_at(fixed_state());
    StepResult r;
    for (int i = 0; i < 256; ++i) {
      REQUIRE_FALSE(r.done);
      r = env.step(Action::kTurnLeft);
    }
    CHECK(r.done);
    CHECK(r.reward == 0.0);
    CHECK(r.cause == TerminalCause::kTimeout);
    CHECK_THROWS_AS(env.step(Action::kTurnLeft), std::logic_error);
  }

  TEST_CASE("picking up the green object succeeds with reward 1") {
    FetchEnv env = env_at(fixed_state());
    StepResult r = env.step(Action::kPickup);
    CHECK(r.done);
    CHECK(r.success);
    CHECK(r.reward == 1.0);
    CHECK(env.state().carrying == 0);
  }

  TEST_CASE("picking up a distractor ends the episode with reward 0") {
    GridState s = fixed_state();
    s.heading = Heading::kSouth;
    s.objects[1].pos = {4, 3};
    FetchEnv env = env_at(s);
    StepResult r = env.step(Action::kPickup);
    CHECK(r.done);
    CHECK_FALSE(r.success);
    CHECK(r.reward == 0.0);
    CHECK(r.cause == TerminalCause::kWrongObject);
  }

  TEST_CASE("pickup facing empty floor does nothing") {
    GridState s = fixed_state();
    s.heading = Heading::kNorth;
    FetchEnv env = env_at(s);
    StepResult r = env.step(Action::kPickup);
    CHECK_FALSE(r.done);
    CHECK(env.state().carrying == -1);
  }

  TEST_CASE("episode dump round trips and replays") {
    std::vector<EpisodeRecord> eps = {{7, {0, 2, 2, 1, 3}}, {8, {}}};
    std::vector<EpisodeRecord> back = from_jsonl(to_jsonl(eps));
    REQUIRE(back.size() == 2);
    CHECK(back[0].seed == 7);
    CHECK(back[0].actions == eps[0].actions);
    std::vector<GridState> states = replay(eps[0]);
    CHECK(states.size() <= 6);
    FetchEnv env;
    env.reset(7);
    CHECK(states.front() == env.state());
    CHECK_THROWS(from_jsonl("{\"seed\": 1, \"actions\": [9]}\n"));
  }
}
