// Writes a seeded random model and a matching toy vocabulary.
#include <cstdio>
#include <exception>

#include "CLI11.hpp"
#include "smap/model.h"
#include "smap/weight_io.h"

int main(int argc, char** argv) {
  CLI::App app{"Generate a seeded toy SMAP model and vocabulary"};
  std::string model_path = "toy.smap";
  std::string vocab_path = "toy_vocab.json";
  std::uint64_t seed = 7;
  smap::ModelConfig config = smap::toy_config();
  app.add_option("--out-model", model_path, "Model output path");
  app.add_option("--out-vocab", vocab_path, "Vocabulary output path");
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--layers", config.n_layers)->check(CLI::PositiveNumber);
  app.add_option("--d-model", config.d_model)->check(CLI::PositiveNumber);
  app.add_option("--heads", config.n_heads)->check(CLI::PositiveNumber);
  app.add_option("--d-ff", config.d_ff)->check(CLI::PositiveNumber);
  app.add_option("--vocab-size", config.vocab_size)->check(CLI::Range(3, 1 << 20));
  app.add_option("--context", config.max_seq_len)->check(CLI::PositiveNumber);
  app.add_flag("--tied", config.tied_embeddings, "Tie the output head to the embedding");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return e.get_exit_code() == 0 ? 0 : (app.exit(e), 2);
  }

  try {
    const auto weights = smap::make_random_weights(config, seed);
    smap::save_model(model_path, weights);
    smap::make_toy_vocabulary(config.vocab_size).save(vocab_path);
  } catch (const smap::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  std::printf("wrote %s and %s\n", model_path.c_str(), vocab_path.c_str());
  return 0;
}
