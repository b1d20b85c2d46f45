// smap: map-level decoding runtime.
//
// Exit codes: 0 success, 2 invalid flags, 3 I/O failure, 4 model/vocabulary
// errors. Nothing is written to stdout unless the command succeeds.
#include <cstdint>
#include <filesystem>
#include <map>
#include <cstdio>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "smap/logit_lens.h"
#include "smap/map_decoding.h"
#include "smap/model.h"
#include "smap/weight_io.h"

namespace {

using namespace smap;

constexpr int kExitFlags = 2;
constexpr int kExitIo = 3;
constexpr int kExitModel = 4;

struct CliError {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, std::string message) { throw CliError{code, std::move(message)}; }

const std::map<std::string, bool> kOnOff{{"on", true}, {"off", false}};

// Flags shared by every subcommand that runs the decoder.
struct MapFlags {
  std::string mode = "map";
  float alpha = 0.80f;
  float beta = 0.10f;
  std::size_t start_layer = 1;
  std::string map_op = "crisscross";
  std::size_t local_radius = 1;
  bool broadcast = true;
  bool fusion = true;
  std::string cache = "faithful";
  bool refine_prefill = true;
  std::string preset;

  CLI::Option* alpha_opt = nullptr;
  CLI::Option* beta_opt = nullptr;
  CLI::Option* start_opt = nullptr;

  void add_to(CLI::App& app) {
    app.add_option("--mode", mode, "vanilla or map")
        ->check(CLI::IsMember({"vanilla", "map"}));
    alpha_opt = app.add_option("--alpha", alpha, "Weight kept on the original state")
                    ->check(CLI::Range(0.0f, 1.0f));
    beta_opt = app.add_option("--beta", beta, "Weight kept on the local token in fusion")
                   ->check(CLI::Range(0.0f, 1.0f));
    start_opt = app.add_option("--start-layer", start_layer, "First refined layer (1-based)")
                    ->check(CLI::PositiveNumber);
    app.add_option("--map-op", map_op, "crisscross, global or local")
        ->check(CLI::IsMember({"crisscross", "global", "local"}));
    app.add_option("--local-radius", local_radius, "Window radius for --map-op local")
        ->check(CLI::PositiveNumber);
    app.add_option("--broadcast", broadcast, "on or off")
        ->transform(CLI::CheckedTransformer(kOnOff));
    app.add_option("--fusion", fusion, "on or off")->transform(CLI::CheckedTransformer(kOnOff));
    app.add_option("--cache", cache, "faithful or cached")
        ->check(CLI::IsMember({"faithful", "cached"}));
    app.add_option("--refine-prefill", refine_prefill, "on or off")
        ->transform(CLI::CheckedTransformer(kOnOff));
    app.add_option("--preset", preset, "Hyperparameter preset name");
  }

  MapDecodeConfig resolve() const {
    MapDecodeConfig c;
    c.mode = mode == "vanilla" ? DecodeMode::vanilla : DecodeMode::map;
    c.alpha = alpha;
    c.beta = beta;
    c.start_layer = start_layer;
    if (!preset.empty()) {
      const Preset* p = find_preset(preset);
      if (!p) {
        std::string names;
        for (const Preset& q : presets()) names += (names.empty() ? "" : ", ") + std::string(q.name);
        fail(kExitFlags, "unknown preset '" + preset + "' (known: " + names + ")");
      }
      apply_preset(c, *p);
      // Explicit flags win over the preset.
      if (alpha_opt->count()) c.alpha = alpha;
      if (beta_opt->count()) c.beta = beta;
      if (start_opt->count()) c.start_layer = start_layer;
    }
    if (map_op == "global") {
      c.neighborhood = NeighborhoodKind::global();
    } else if (map_op == "local") {
      c.neighborhood = NeighborhoodKind::local(local_radius);
    }
    c.broadcast = broadcast;
    c.fusion = c.mode == DecodeMode::map && fusion;
    c.cache_mode = cache == "cached" ? CacheMode::cached : CacheMode::faithful;
    c.refine_prefill = refine_prefill;
    return c;
  }
};

std::string format_float(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

std::string short_float(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", x);
  return buf;
}

void describe_config(const MapDecodeConfig& c, std::size_t n_layers) {
  if (c.mode == DecodeMode::vanilla) {
    std::fprintf(stderr, "config: mode=vanilla\n");
    return;
  }
  const StartLayer start = resolve_start_layer(c.start_layer, n_layers);
  if (start.clamped) {
    std::fprintf(stderr, "warning: start layer %zu exceeds model depth %zu; clamped to %zu\n",
                 c.start_layer, n_layers, start.value);
  }
  std::fprintf(stderr,
               "config: mode=map alpha=%s beta=%s start_layer=%zu map_op=%s broadcast=%s "
               "fusion=%s cache=%s\n",
               short_float(c.alpha).c_str(), short_float(c.beta).c_str(), start.value,
               c.neighborhood.name().c_str(), c.broadcast ? "on" : "off", c.fusion ? "on" : "off",
               c.cache_mode == CacheMode::cached ? "cached" : "faithful");
}

ModelWeights open_model(const std::string& path) {
  try {
    return load_model(path);
  } catch (const IoError& e) {
    fail(kExitIo, e.what());
  } catch (const std::exception& e) {
    fail(kExitModel, path + ": " + e.what());
  }
}

Vocabulary open_vocab(const std::string& path, const ModelWeights& weights) {
  try {
    Vocabulary v = Vocabulary::load(path);
    if (v.size() != weights.config.vocab_size) {
      fail(kExitModel, "vocabulary has " + std::to_string(v.size()) + " tokens, model expects " +
                           std::to_string(weights.config.vocab_size));
    }
    return v;
  } catch (const IoError& e) {
    fail(kExitIo, e.what());
  } catch (const CliError&) {
    throw;
  } catch (const std::exception& e) {
    fail(kExitModel, e.what());
  }
}

std::vector<TokenId> parse_ids(const std::string& text, std::size_t vocab_size) {
  std::vector<TokenId> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size() || v >= vocab_size) throw std::out_of_range(item);
      ids.push_back(static_cast<TokenId>(v));
    } catch (const std::exception&) {
      fail(kExitFlags, "invalid token id '" + item + "' in --prompt-ids");
    }
  }
  return ids;
}

void check_fits(std::size_t prompt_len, std::size_t new_tokens, const ModelWeights& w) {
  if (prompt_len == 0) fail(kExitFlags, "prompt encodes to zero tokens");
  if (prompt_len + new_tokens > w.config.max_seq_len) {
    fail(kExitFlags, "prompt of " + std::to_string(prompt_len) + " tokens plus " +
                         std::to_string(new_tokens) + " new tokens exceeds context of " +
                         std::to_string(w.config.max_seq_len));
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(kExitIo, "cannot open " + path + " for writing");
  out << content;
  out.flush();
  if (!out) fail(kExitIo, "write failed: " + path);
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string model, vocab, prompt, prompt_ids, trace, logits_out;
  std::size_t max_tokens = 16;
  MapFlags map;
};

std::string run_generate(const GenerateArgs& a) {
  const MapDecodeConfig base = a.map.resolve();
  if (a.prompt.empty() == a.prompt_ids.empty()) {
    fail(kExitFlags, "exactly one of --prompt or --prompt-ids is required");
  }
  const ModelWeights weights = open_model(a.model);
  const Vocabulary vocab = open_vocab(a.vocab, weights);
  const std::vector<TokenId> prompt = a.prompt_ids.empty()
                                          ? vocab.encode(a.prompt)
                                          : parse_ids(a.prompt_ids, weights.config.vocab_size);
  check_fits(prompt.size(), a.max_tokens, weights);

  MapDecodeConfig config = base;
  config.max_new_tokens = a.max_tokens;
  describe_config(config, weights.config.n_layers);

  Generation gen;
  std::string logits_json;
  if (a.max_tokens > 0) {
    DecodeSession session(weights, config, prompt);
    while (gen.tokens.size() < config.max_new_tokens) {
      StepResult r = session.step();
      if (gen.tokens.empty() && !a.logits_out.empty()) {
        logits_json = nlohmann::json(session.logits()).dump() + "\n";
      }
      gen.tokens.push_back(r.token);
      gen.trace.push_back(std::move(r.trace));
      if (config.eos_token && r.token == *config.eos_token) break;
    }
  }

  if (!a.trace.empty()) {
    std::ostringstream ts;
    write_trace_jsonl(gen.trace, ts);
    write_text_file(a.trace, ts.str());
  }
  if (!a.logits_out.empty()) write_text_file(a.logits_out, logits_json);

  std::vector<TokenId> shown = gen.tokens;
  if (!shown.empty() && config.eos_token && shown.back() == *config.eos_token) shown.pop_back();
  return vocab.decode(shown) + "\n";
}

// ---------------------------------------------------------------- lens

struct LensArgs {
  std::string model, vocab, prompt, target, out = ".", format = "csv", map_csv;
  MapFlags map;
};

std::string run_lens(const LensArgs& a) {
  MapFlags flags = a.map;
  const MapDecodeConfig config = flags.resolve();
  const HeatmapFormat format = a.format == "pgm" ? HeatmapFormat::pgm : HeatmapFormat::csv;
  const ModelWeights weights = open_model(a.model);
  const Vocabulary vocab = open_vocab(a.vocab, weights);

  const auto target_ids = vocab.encode(a.target);
  if (target_ids.empty()) fail(kExitFlags, "--target must not be empty");
  const TokenId target = target_ids.front();
  if (target == Vocabulary::kUnk) {
    std::fprintf(stderr, "warning: target '%s' is not in the vocabulary; using <unk> (%u)\n",
                 a.target.c_str(), target);
  } else if (target_ids.size() > 1) {
    std::fprintf(stderr, "warning: target '%s' splits into %zu tokens; scoring the first (%u)\n",
                 a.target.c_str(), target_ids.size(), target);
  }

  const auto prompt = vocab.encode(a.prompt);
  check_fits(prompt.size(), 1, weights);

  SemanticMap map;
  if (config.mode == DecodeMode::vanilla) {
    map = forward_full(prompt, weights).hidden_states;
  } else {
    describe_config(config, weights.config.n_layers);
    DecodeSession session(weights, config, prompt);
    session.step();
    map = session.map();
  }

  const ConfidenceMap cm = confidence_map(map, weights, target);
  const std::string path = (std::filesystem::path(a.out) / heatmap_filename(target, format)).string();
  try {
    export_heatmap(cm, path, format);
    if (!a.map_csv.empty()) save_map_csv(map, a.map_csv);
  } catch (const IoError& e) {
    fail(kExitIo, e.what());
  }

  const ConfidenceSummary s = summarize_one(cm);
  std::ostringstream out;
  out << path << '\n'
      << "target=" << target << " max_prob=" << format_float(s.max_prob)
      << " at layer=" << (s.argmax_cell.layer + 1) << " position=" << (s.argmax_cell.position + 1)
      << " mean_prob=" << format_float(s.mean_prob) << '\n';
  return out.str();
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string model, vocab, prompts, suite = "mapops";
  float alpha = 0.80f;
  float beta = 0.10f;
  std::size_t start_layer = 2;
  std::size_t max_tokens = 8;
  bool fusion = false;
  std::string cache = "faithful";
};

struct Variant {
  std::string name;
  MapDecodeConfig config;
};

struct VariantResult {
  std::vector<std::vector<TokenId>> outputs;
  double fused_gap_sum = 0.0;
  std::size_t steps = 0;
};

std::vector<Variant> mapops_suite(const AblateArgs& a, std::size_t n_layers) {
  MapDecodeConfig base;
  base.alpha = a.alpha;
  base.beta = a.beta;
  base.fusion = a.fusion;
  base.max_new_tokens = a.max_tokens;
  base.cache_mode = a.cache == "cached" ? CacheMode::cached : CacheMode::faithful;

  // Non-layer-wise operations refine only the final layer's map.
  auto final_only = [&](NeighborhoodKind kind) {
    MapDecodeConfig c = base;
    c.neighborhood = kind;
    c.start_layer = n_layers;
    c.broadcast = false;
    return c;
  };
  MapDecodeConfig layerwise = base;
  layerwise.start_layer = a.start_layer;
  MapDecodeConfig no_broadcast = layerwise;
  no_broadcast.broadcast = false;
  MapDecodeConfig vanilla = MapDecodeConfig::vanilla();
  vanilla.max_new_tokens = a.max_tokens;
  vanilla.cache_mode = base.cache_mode;

  return {
      {"vanilla", vanilla},
      {"global", final_only(NeighborhoodKind::global())},
      {"local-5x5", final_only(NeighborhoodKind::local(2))},
      {"local-7x7", final_only(NeighborhoodKind::local(3))},
      {"crisscross", final_only(NeighborhoodKind::crisscross())},
      {"layerwise-crisscross-no-broadcast", no_broadcast},
      {"layerwise-crisscross-broadcast", layerwise},
  };
}

std::uint64_t digest(const std::vector<std::vector<TokenId>>& outputs) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t x) {
    for (int i = 0; i < 4; ++i) {
      h ^= (x >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const auto& seq : outputs) {
    for (TokenId t : seq) mix(t);
    mix(0xffffffffu);
  }
  return h;
}

std::string run_ablate(const AblateArgs& a) {
  const ModelWeights weights = open_model(a.model);
  const Vocabulary vocab = open_vocab(a.vocab, weights);

  std::ifstream in(a.prompts);
  if (!in) fail(kExitIo, "cannot open " + a.prompts);
  std::vector<std::vector<TokenId>> prompts;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    prompts.push_back(vocab.encode(line));
    check_fits(prompts.back().size(), a.max_tokens, weights);
  }
  if (prompts.empty()) fail(kExitFlags, "prompt file " + a.prompts + " contains no prompts");

  const auto variants = mapops_suite(a, weights.config.n_layers);
  std::vector<std::future<VariantResult>> jobs;
  for (const Variant& v : variants) {
    jobs.push_back(std::async(std::launch::async, [&weights, &prompts, cfg = v.config] {
      VariantResult r;
      for (const auto& p : prompts) {
        Generation g = generate(weights, p, cfg);
        for (const TraceEntry& e : g.trace) r.fused_gap_sum += e.fused_gap;
        r.steps += g.trace.size();
        r.outputs.push_back(std::move(g.tokens));
      }
      return r;
    }));
  }
  std::vector<VariantResult> results;
  for (auto& j : jobs) results.push_back(j.get());

  const auto& reference = results.front().outputs;
  std::ostringstream out;
  out << std::left << std::setw(36) << "variant" << std::setw(14) << "prompt_agree"
      << std::setw(14) << "token_agree" << std::setw(16) << "mean_fused_gap"
      << "digest\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& outs = results[i].outputs;
    std::size_t same_prompts = 0, same_tokens = 0, total_tokens = 0;
    for (std::size_t p = 0; p < outs.size(); ++p) {
      if (outs[p] == reference[p]) ++same_prompts;
      const std::size_t len = std::max(outs[p].size(), reference[p].size());
      total_tokens += len;
      for (std::size_t k = 0; k < std::min(outs[p].size(), reference[p].size()); ++k) {
        if (outs[p][k] == reference[p][k]) ++same_tokens;
      }
    }
    const double gap = results[i].steps ? results[i].fused_gap_sum / results[i].steps : 0.0;
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(digest(outs)));
    out << std::left << std::setw(36) << variants[i].name << std::fixed << std::setprecision(4)
        << std::setw(14) << static_cast<double>(same_prompts) / outs.size() << std::setw(14)
        << (total_tokens ? static_cast<double>(same_tokens) / total_tokens : 1.0)
        << std::setprecision(6) << std::setw(16) << gap << hex << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------- inspect

std::string run_inspect(const std::string& model) {
  ModelFileHeader header;
  try {
    header = read_model_header(model);
    (void)load_model(model);
  } catch (const IoError& e) {
    fail(kExitIo, e.what());
  } catch (const std::exception& e) {
    fail(kExitModel, model + ": " + e.what());
  }
  const ModelConfig& c = header.config;
  std::ostringstream out;
  out << "format=SMAP version=" << header.version << '\n'
      << "vocab_size=" << c.vocab_size << '\n'
      << "d_model=" << c.d_model << '\n'
      << "n_layers=" << c.n_layers << '\n'
      << "n_heads=" << c.n_heads << '\n'
      << "d_ff=" << c.d_ff << '\n'
      << "max_seq_len=" << c.max_seq_len << '\n'
      << "norm_eps=" << format_float(c.norm_eps) << '\n'
      << "rope_theta=" << format_float(c.rope_theta) << '\n'
      << "tied_embeddings=" << (c.tied_embeddings ? "true" : "false") << '\n'
      << "tensors=" << header.tensors.size() << '\n';
  for (const TensorEntry& t : header.tensors) {
    out << "  " << t.name << " [";
    for (std::size_t i = 0; i < t.shape.size(); ++i) out << (i ? "," : "") << t.shape[i];
    out << "] offset=" << t.offset << '\n';
  }
  return out.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Map-level decoding runtime"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate_cmd = app.add_subcommand("generate", "Greedy generation, vanilla or map-level");
  generate_cmd->add_option("--model", gen.model)->required();
  generate_cmd->add_option("--vocab", gen.vocab)->required();
  generate_cmd->add_option("--prompt", gen.prompt, "Prompt text");
  generate_cmd->add_option("--prompt-ids", gen.prompt_ids, "Comma-separated token ids");
  generate_cmd->add_option("--max-tokens", gen.max_tokens);
  generate_cmd->add_option("--trace", gen.trace, "Write the decode trace as JSON lines");
  generate_cmd->add_option("--logits-out", gen.logits_out, "Write first-step logits as JSON");
  gen.map.add_to(*generate_cmd);

  LensArgs lens;
  auto* lens_cmd = app.add_subcommand("lens", "Logit-lens confidence heatmap for one token");
  lens_cmd->add_option("--model", lens.model)->required();
  lens_cmd->add_option("--vocab", lens.vocab)->required();
  lens_cmd->add_option("--prompt", lens.prompt)->required();
  lens_cmd->add_option("--target", lens.target)->required();
  lens_cmd->add_option("--out", lens.out, "Output directory");
  lens_cmd->add_option("--format", lens.format)->check(CLI::IsMember({"csv", "pgm"}));
  lens_cmd->add_option("--map-csv", lens.map_csv, "Also dump the semantic map as CSV");
  lens.map.mode = "vanilla";
  lens.map.add_to(*lens_cmd);

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Compare map operations against vanilla");
  ablate_cmd->add_option("--model", ablate.model)->required();
  ablate_cmd->add_option("--vocab", ablate.vocab)->required();
  ablate_cmd->add_option("--prompts", ablate.prompts, "One prompt per line")->required();
  ablate_cmd->add_option("--suite", ablate.suite)->check(CLI::IsMember({"mapops"}));
  ablate_cmd->add_option("--alpha", ablate.alpha)->check(CLI::Range(0.0f, 1.0f));
  ablate_cmd->add_option("--beta", ablate.beta)->check(CLI::Range(0.0f, 1.0f));
  ablate_cmd->add_option("--start-layer", ablate.start_layer, "Start of layer-wise variants")
      ->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--max-tokens", ablate.max_tokens);
  ablate_cmd->add_option("--fusion", ablate.fusion)->transform(CLI::CheckedTransformer(kOnOff));
  ablate_cmd->add_option("--cache", ablate.cache)->check(CLI::IsMember({"faithful", "cached"}));

  std::string inspect_model;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print model config and tensor manifest");
  inspect_cmd->add_option("--model", inspect_model)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFlags;
  }

  try {
    std::string out;
    if (*generate_cmd) {
      out = run_generate(gen);
    } else if (*lens_cmd) {
      out = run_lens(lens);
    } else if (*ablate_cmd) {
      out = run_ablate(ablate);
    } else {
      out = run_inspect(inspect_model);
    }
    std::fwrite(out.data(), 1, out.size(), stdout);
    return 0;
  } catch (const CliError& e) {
    std::fprintf(stderr, "error: %s\n", e.message.c_str());
    return e.code;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitModel;
  }
}
