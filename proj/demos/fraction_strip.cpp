// Translates one source glyph at several fractions and tiles the results left to right.
// usage: fraction_strip <config.toml> <out.png> [test index]
// Checkpoints come from the config's checkpoint_dir (run `r2i train ...` first).

#include <iostream>

#include "r2i/workflow.hpp"

using namespace r2i;

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: fraction_strip <config.toml> <out.png> [test index]\n";
    return 2;
  }
  tune_allocator();
  try {
    RunConfig cfg = load_run_config(argv[1]);
    propagate_seed(cfg);
    const Experiment e = load_experiment(cfg);
    const Models m = prepare_models(e, false);
    const TestSet test = make_test_set(e);
    const std::int64_t idx = argc > 3 ? std::stoll(argv[3]) : 0;
    if (idx < 0 || idx >= test.images.dim(0)) throw std::out_of_range("test index out of range");

    const Tensor src = slice_batch(test.images, idx, idx + 1);
    const std::int64_t h = src.dim(1), w = src.dim(2);
    const std::vector<double> fractions{0.3, 0.5, 0.7, 0.8, 0.95, 1.0};
    Tensor strip({h, w * static_cast<std::int64_t>(fractions.size() + 1), 3});
    auto paste = [&](const Tensor& img, std::int64_t col) {
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c) strip.data()[((y * strip.dim(1)) + col * w + x) * 3 + c] = img.data()[(y * w + x) * 3 + c];
    };
    paste(src, 0);
    TranslationConfig tc = cfg.translation;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      tc.fraction = fractions[i];
      const Tensor out = translate_batch(src, {test.class_ids[idx]}, tc, m);
      paste(out, static_cast<std::int64_t>(i) + 1);
      std::cout << "f=" << fractions[i] << "  k=" << step_from_fraction(fractions[i], m.schedule.steps())
                << "  orientation " << to_string(orientation_of(out.reshaped({h, w, 3}))) << "\n";
    }
    write_png(argv[2], strip);
    std::cout << "wrote " << argv[2] << " (source " << test.ids[idx] << ", class "
              << m.denoiser.vocab.classes()[test.class_ids[idx]] << ")\n";
    return 0;
  } catch (const std::exception& ex) {
    std::cerr << "fraction_strip: " << ex.what() << "\n";
    return 1;
  }
}
