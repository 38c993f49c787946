// Runs the whole evaluation pipeline against the in-process mock endpoints
// shipped with the test fixtures and prints the overall score table.
//
//   pipeline_demo [fixtures-dir]

#include <iostream>

#include "exameval.hpp"

using namespace exameval;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
    const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::path(EXAMEVAL_FIXTURES_DIR);
    try {
        const Benchmark b = load_benchmark(dir / "benchmark.json");
        auto cfg = [&](const std::string& name) {
            ModelConfig c = model_config_from_json(load_config_file(dir / "configs" / (name + ".json")));
            c.endpoint_url = "mock:" + (dir / "mock" / ("answer_" + name + ".json")).string();
            return c;
        };
        ModelConfig judge_cfg = model_config_from_json(load_config_file(dir / "configs" / "evaluator.json"));
        judge_cfg.endpoint_url = "mock:" + (dir / "mock" / "evaluator.json").string();
        ChatClient judge(judge_cfg);

        std::vector<AnswerRecord> answers;
        for (const std::string m : {"model-a", "model-b"}) {
            ChatClient client(cfg(m));
            auto run = run_answers(b, client);
            answers.insert(answers.end(), run.records.begin(), run.records.end());
        }
        const GradeBook gb = grade_answer_set(answers, b, judge, GradingOptions{.run_id = "demo"});
        for (const auto& s : score_all(gb, b))
            std::cout << s.model << ": " << s.earned_total.to_string(1) << " / " << s.max_total.to_string(1) << " = "
                      << render_pct(s.score_pct) << "%\n";
        std::cout << "\n" << table2_markdown(build_table2(gb, b, "model-a", TableOptions{.seed = Seed{42}}));
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    }
}
