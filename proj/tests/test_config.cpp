#include <catch2/catch_amalgamated.hpp>

#include <string>

#include "petrec/config.hpp"

using namespace petrec;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

TEST_CASE("ini parser handles sections, comments and whitespace") {
    const std::string text =
        "# leading comment\n"
        "[grid]\n"
        "nx = 32   # trailing comment\n"
        "  ny=48\n"
        "\n"
        "[method.em]\n"
        "iterations = 10\n";
    IniDoc doc = parse_ini(text, "t.ini");
    REQUIRE(doc.sections.size() == 2);
    REQUIRE(doc.sections[0].name == "grid");
    REQUIRE(doc.sections[0].line == 2);
    REQUIRE(doc.sections[0].find("nx")->value == "32");
    REQUIRE(doc.sections[0].find("nx")->line == 3);
    REQUIRE(doc.sections[0].find("ny")->value == "48");
    REQUIRE(doc.find("method.em") != nullptr);
    REQUIRE(doc.find("nope") == nullptr);
}

TEST_CASE("ini parser reports the offending line") {
    auto line_of = [](const std::string& text) -> std::string {
        try {
            parse_ini(text, "bad.ini");
        } catch (const input_error& e) {
            return e.what();
        }
        return "";
    };
    REQUIRE_THAT(line_of("[grid\nnx = 1\n"), ContainsSubstring("bad.ini:1:"));
    REQUIRE_THAT(line_of("nx = 1\n"), ContainsSubstring("bad.ini:1:"));
    REQUIRE_THAT(line_of("[grid]\njust words\n"), ContainsSubstring("bad.ini:2:"));
    REQUIRE_THAT(line_of("[grid]\nnx = 1\nnx = 2\n"), ContainsSubstring("bad.ini:3:"));
    REQUIRE_THAT(line_of("[grid]\nnx = 1\nnx = 2\n"), ContainsSubstring("duplicate key"));
    REQUIRE_THAT(line_of("[a]\n[a]\n"), ContainsSubstring("bad.ini:2:"));
    REQUIRE_THAT(line_of("[grid]\n = 5\n"), ContainsSubstring("empty key"));
}

TEST_CASE("experiment config resolves every section") {
    const std::string text =
        "[grid]\n"
        "nx = 32\n"
        "ny = 32\n"
        "pixel_size = 2\n"
        "[geometry]\n"
        "n_radial = 48\n"
        "n_angles = 40\n"
        "[simulate]\n"
        "phantom = brain\n"
        "levels = 1e7, 1e6\n"
        "fraction = 0.2\n"
        "seeds = 1 2 3\n"
        "[method.em]\n"
        "iterations = 30\n"
        "[method.proposed]\n"
        "method = deepred_sgld\n"
        "iterations = 40\n"
        "lambda = 2.5\n"
        "kappa = 0.8\n"
        "gen_channels = 8\n"
        "gen_depth = 2\n"
        "eval_every = 5\n"
        "[report]\n"
        "dir = results\n"
        "eval_every = 10\n";
    ExperimentConfig cfg = parse_experiment_config(text, "exp.ini");
    REQUIRE(cfg.grid.nx == 32);
    REQUIRE(cfg.grid.pixel_size == 2.0);
    REQUIRE(cfg.n_radial == 48);
    REQUIRE(cfg.n_angles == 40);
    REQUIRE(cfg.phantom == "brain");
    REQUIRE(cfg.levels == std::vector<double>{1e7, 1e6});
    REQUIRE(cfg.background_fraction == 0.2);
    REQUIRE(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3});
    REQUIRE(cfg.methods.size() == 2);
    REQUIRE(cfg.methods[0].first == "em");
    REQUIRE(cfg.methods[0].second.method == Method::em);
    REQUIRE(cfg.methods[0].second.iterations == 30);
    REQUIRE(cfg.methods[1].first == "proposed");
    REQUIRE(cfg.methods[1].second.method == Method::deepred_sgld);
    REQUIRE(cfg.methods[1].second.lambda == 2.5);
    REQUIRE(cfg.methods[1].second.kappa == 0.8);
    REQUIRE(cfg.methods[1].second.gen_spec.base_channels == 8);
    REQUIRE(cfg.methods[1].second.gen_spec.depth == 2);
    REQUIRE(cfg.methods[1].second.eval_every == 5);
    REQUIRE(cfg.find_method("proposed") != nullptr);
    REQUIRE(cfg.find_method("admm") == nullptr);
    REQUIRE(cfg.out_dir == "results");
    REQUIRE(cfg.report_eval_every == 10);
    REQUIRE(cfg.text_hash == fnv1a64(text));
    REQUIRE(cfg.raw_text == text);
}

TEST_CASE("grid and geometry defaults follow the scale flag") {
    ExperimentConfig desk = parse_experiment_config("", "d.ini", false);
    REQUIRE(desk.grid.nx == 64);
    REQUIRE(desk.grid.ny == 64);
    REQUIRE(desk.n_radial == 96);
    REQUIRE(desk.n_angles == 96);
    ExperimentConfig full = parse_experiment_config("", "f.ini", true);
    REQUIRE(full.grid.nx == 128);
    REQUIRE(full.n_radial == 180);
    REQUIRE(full.n_angles == 180);
    // explicit keys beat the flag
    ExperimentConfig mixed = parse_experiment_config("[grid]\nnx = 20\nny = 20\n", "m.ini", true);
    REQUIRE(mixed.grid.nx == 20);
    REQUIRE(mixed.n_radial == 180);
}

TEST_CASE("config validation failures carry file and line context") {
    auto msg = [](const std::string& text) -> std::string {
        try {
            parse_experiment_config(text, "exp.ini");
        } catch (const input_error& e) {
            return e.what();
        }
        return "";
    };
    REQUIRE_THAT(msg("[grid]\nnx = abc\n"), ContainsSubstring("exp.ini:2:"));
    REQUIRE_THAT(msg("[grid]\nnx = 1.5\n"), ContainsSubstring("integer"));
    REQUIRE_THAT(msg("[grid]\nspacing = 1\n"), ContainsSubstring("unknown key 'spacing'"));
    REQUIRE_THAT(msg("[gird]\n"), ContainsSubstring("unknown section [gird]"));
    REQUIRE_THAT(msg("[simulate]\nlevels = 1e6, -5\n"), ContainsSubstring("levels must be > 0"));
    REQUIRE_THAT(msg("[simulate]\nlevels =  \n"), ContainsSubstring("empty list"));
    REQUIRE_THAT(msg("[simulate]\nphantom = torso\n"), ContainsSubstring("unknown phantom 'torso'"));
    REQUIRE_THAT(msg("[simulate]\nseeds = -1\n"), ContainsSubstring("nonnegative"));
    REQUIRE_THAT(msg("[method.em]\niterations = 0\n"),
                 ContainsSubstring("iterations must be >= 1"));
    REQUIRE_THAT(msg("[method.em]\niterations = 0\n"), ContainsSubstring("exp.ini:1:"));
    REQUIRE_THAT(msg("[method.mine]\niterations = 5\n"),
                 ContainsSubstring("needs an explicit 'method ='"));
    REQUIRE_THAT(msg("[method.mine]\nmethod = admm\n"), ContainsSubstring("exp.ini:2:"));
    REQUIRE_THAT(msg("[method.em]\nnois_into_moments = true\n"),
                 ContainsSubstring("unknown key"));
    REQUIRE_THAT(msg("[method.em]\nnoise_into_moments = yes\n"),
                 ContainsSubstring("must be true or false"));
    REQUIRE_THAT(msg("[report]\neval_every = 0\n"), ContainsSubstring("eval_every must be >= 1"));
}

TEST_CASE("method blocks inherit the block name as the method") {
    ExperimentConfig cfg = parse_experiment_config(
        "[method.deepred_sgd]\niterations = 7\n[method.tv]\nbeta = 0.3\n", "exp.ini");
    REQUIRE(cfg.methods[0].second.method == Method::deepred_sgd);
    REQUIRE(cfg.methods[0].second.iterations == 7);
    REQUIRE(cfg.methods[1].second.method == Method::tv);
    REQUIRE(cfg.methods[1].second.beta == 0.3);
}
