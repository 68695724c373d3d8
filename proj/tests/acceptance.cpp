// Acceptance run: one PASS/FAIL line per numbered criterion, then the trained-model invariants.
// Data and checkpoints are cached under the work directory (argv[1], default ./acceptance);
// a checkpoint is reused only while its fingerprint matches the current config and data.

#include <algorithm>
#include <iostream>

#include "r2i/verify.hpp"

using namespace r2i;

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance");
  tune_allocator();
  try {
    RunConfig cfg;
    cfg.data_root = (work / "data").string();
    cfg.checkpoint_dir = (work / "checkpoints").string();
    cfg.out_dir = (work / "out").string();
    propagate_seed(cfg);

    const auto t0 = std::chrono::steady_clock::now();
    auto log = [&](const std::string& s) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "[" << std::fixed << std::setprecision(0) << sec << " s] " << s << std::endl;
    };
    if (!fs::exists(fs::path(cfg.data_root) / "manifest.jsonl")) {
      log("generating toy dataset");
      gen_toy_dataset(cfg.data_root, cfg.seed);
    }
    const Experiment e = load_experiment(cfg, log);
    const Models m = prepare_models(e, true, log);
    const TestSet test = make_test_set(e);
    const FeatureMatrix ref = reference_features(e, m);
    TranslationRuns runs(test, m, ref, cfg.translation);

    detail::Checker ck([](const CheckLine& l) { std::cout << format_check(l) << std::endl; });
    verify_model_free(ck);
    verify_trained(ck, e, m, runs);

    auto lines = ck.lines();
    std::stable_partition(lines.begin(), lines.end(), [](const CheckLine& l) { return l.id[0] != 'M'; });
    std::stable_sort(lines.begin(), lines.begin() + 10,
                     [](const CheckLine& a, const CheckLine& b) { return std::stoi(a.id) < std::stoi(b.id); });
    std::cout << "\nsummary\n";
    std::size_t failed = 0;
    for (const auto& l : lines) {
      std::cout << format_check(l) << '\n';
      failed += !l.pass;
    }
    std::cout << lines.size() - failed << "/" << lines.size() << " checks passed" << std::endl;
    return failed ? 1 : 0;
  } catch (const std::exception& ex) {
    std::cerr << "acceptance: " << ex.what() << std::endl;
    return 1;
  }
}
