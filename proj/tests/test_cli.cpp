#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "helpers.hpp"
#include "ilcot/net.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(ILCOT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cli: vocab and usage errors") {
  const auto dir = testing::temp_dir("cli_basic");
  CHECK(run_cli("vocab", dir / "vocab.txt") == 0);
  const std::string v = slurp(dir / "vocab.txt");
  CHECK(v.find("VIS_START") != std::string::npos);
  CHECK(v.find("TEXTMODE") != std::string::npos);
  CHECK(run_cli("no-such-command", dir / "bad.txt") == 2);
  CHECK(run_cli("gen --n 5 --out " + (dir / "d").string() + " --mix 1,1", dir / "mix.txt") != 0);
  CHECK(run_cli("edit --checkpoint " + (dir / "missing.bin").string() + " --out " + (dir / "o").string() +
                    " --instruction \"REMOVE RED SQUARE\"",
                dir / "ckpt.txt") != 0);
  CHECK(slurp(dir / "ckpt.txt").rfind("error: ", 0) == 0);
}

TEST_CASE("cli: gen then edit is deterministic") {
  const auto dir = testing::temp_dir("cli_edit");
  REQUIRE(run_cli("gen --n 20 --out " + (dir / "data").string(), dir / "gen.txt") == 0);
  CHECK(fs::exists(dir / "data" / "dataset.jsonl"));
  CHECK(fs::exists(dir / "data" / "manifest.json"));
  ilcot::save_checkpoint(dir / "m.bin", testing::random_model(1));

  const std::string common = "edit --checkpoint " + (dir / "m.bin").string() + " --record " +
                             (dir / "data" / "dataset.jsonl").string() + " --id 3 --width 2 --euler-steps 2 --max-segments 3";
  REQUIRE(run_cli("--seed 5 " + common + " --out " + (dir / "a").string(), dir / "a.txt") == 0);
  REQUIRE(run_cli("--seed 5 " + common + " --out " + (dir / "b").string(), dir / "b.txt") == 0);
  CHECK(fs::exists(dir / "a" / "input.ppm"));
  CHECK(slurp(dir / "a" / "chain.txt") == slurp(dir / "b" / "chain.txt"));
  for (const auto& e : fs::directory_iterator(dir / "a"))
    CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
}
