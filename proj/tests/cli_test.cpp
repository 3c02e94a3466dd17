#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ftx/io.hpp"
#include "ftx/persist.hpp"
#include "ftx/tokenizer.hpp"

using namespace ftx;
namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int exit_code;
    std::string out;
};

std::string cli_path() {
    const char* p = std::getenv("FTX_CLI");
    if (!p) {
        ADD_FAILURE() << "FTX_CLI not set";
        return "";
    }
    return p;
}

std::string golden_dir() {
    const char* p = std::getenv("FTX_GOLDEN");
    return p ? p : "tests/golden";
}

// Run the CLI in `dir`, capturing stdout; stderr goes to a side file.
CmdResult run_cli(const fs::path& dir, const std::string& args) {
    std::string cmd = "cd " + dir.string() + " && " + cli_path() + " " + args + " 2>stderr.txt";
    std::array<char, 4096> buf;
    std::string out;
    FILE* pipe = popen(cmd.c_str(), "r");
    EXPECT_NE(pipe, nullptr);
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) {
        out.append(buf.data(), n);
    }
    int status = pclose(pipe);
    return {WEXITSTATUS(status), out};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("ftx_cli_" + std::to_string(::getpid()) + "_" +
                                            ::testing::UnitTest::GetInstance()
                                                ->current_test_info()
                                                ->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        const char* data = std::getenv("FTX_TEST_DATA");
        ASSERT_NE(data, nullptr);
        fs::copy_file(fs::path(data) / "cli_corpus.txt", dir_ / "corpus.txt");
    }

    void TearDown() override { fs::remove_all(dir_); }

    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, TokenizeTrainMatchesGoldenTranscriptAndVocabulary) {
    auto res = run_cli(dir_, "tokenize --train --vocab-size 120 --corpus corpus.txt "
                             "--vocab corpus.vocab");
    EXPECT_EQ(res.exit_code, 0);
    EXPECT_EQ(res.out, read_file(golden_dir() + "/tokenize_stdout.txt"));
    EXPECT_EQ(read_file((dir_ / "corpus.vocab").string()),
              read_file(golden_dir() + "/corpus_vocab.golden"));
}

TEST_F(CliTest, TokenizeVocabSizeContractHolds) {
    run_cli(dir_, "tokenize --train --vocab-size 120 --corpus corpus.txt --vocab v.vocab");
    auto vocab = load_vocabulary((dir_ / "v.vocab").string());
    EXPECT_EQ(vocab.n_vocab(), 120);  // exactly the requested IDs incl. 3 specials
}

TEST_F(CliTest, TokenizeEncodeDecodeReproducesCorpusBytes) {
    run_cli(dir_, "tokenize --train --vocab-size 120 --corpus corpus.txt --vocab v.vocab");
    auto enc = run_cli(dir_, "tokenize --encode --corpus corpus.txt --vocab v.vocab "
                             "--output ids.txt");
    EXPECT_EQ(enc.exit_code, 0);
    auto dec = run_cli(dir_, "tokenize --decode --ids ids.txt --vocab v.vocab --output back.txt");
    EXPECT_EQ(dec.exit_code, 0);
    EXPECT_EQ(read_file((dir_ / "back.txt").string()),
              read_file((dir_ / "corpus.txt").string()));
}

TEST_F(CliTest, TokenizeRerunsProduceIdenticalVocabularyBytes) {
    run_cli(dir_, "tokenize --train --vocab-size 100 --corpus corpus.txt --vocab a.vocab");
    run_cli(dir_, "tokenize --train --vocab-size 100 --corpus corpus.txt --vocab b.vocab");
    EXPECT_EQ(read_file((dir_ / "a.vocab").string()), read_file((dir_ / "b.vocab").string()));
}

TEST_F(CliTest, TrainedSessionMatchesGoldenTranscript) {
    // A scripted session: tokenize, train a tiny model, eval it, and generate
    // greedily. Full stdout must match the committed transcript byte for byte.
    std::string script =
        "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab s.vocab && " +
        cli_path() +
        " train --arch d --corpus corpus.txt --vocab s.vocab --checkpoint s.ftx "
        "--loss-log s.loss --epochs 4 --seed 9 --lmax 24 --d-e 16 --d-attn 8 --d-mid 8 "
        "--d-mlp 32 --layers 1 && " +
        cli_path() + " eval --checkpoint s.ftx --vocab s.vocab --corpus corpus.txt && " +
        cli_path() + " generate --checkpoint s.ftx --vocab s.vocab --prompt \"the \" --tau 0 "
        "--len 8 --seed 3";
    auto res = run_cli(dir_, script);
    EXPECT_EQ(res.exit_code, 0);
    EXPECT_EQ(res.out, read_file(golden_dir() + "/session_stdout.txt"));
    EXPECT_EQ(read_file((dir_ / "s.loss").string()),
              read_file(golden_dir() + "/session_loss.golden"));
}

TEST_F(CliTest, TrainIsDeterministicIncludingCheckpointBytes) {
    std::string flags = "--arch d --corpus corpus.txt --vocab v.vocab --epochs 2 --seed 5 "
                        "--lmax 24 --d-e 16 --d-attn 8 --d-mid 8 --d-mlp 32 --layers 1";
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    auto a = run_cli(dir_, "train " + flags + " --checkpoint a.ftx --loss-log a.loss");
    auto b = run_cli(dir_, "train " + flags + " --checkpoint b.ftx --loss-log b.loss");
    EXPECT_EQ(a.exit_code, 0);
    EXPECT_EQ(a.out.substr(0, a.out.find("checkpoint saved")),
              b.out.substr(0, b.out.find("checkpoint saved")));
    EXPECT_EQ(read_file((dir_ / "a.loss").string()), read_file((dir_ / "b.loss").string()));
    EXPECT_EQ(read_file((dir_ / "a.ftx").string()), read_file((dir_ / "b.ftx").string()));
}

TEST_F(CliTest, EvalOnUniformCheckpointPrintsLogVocab) {
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    // Zero the unembedding so every prediction is uniform: eval must print
    // ln(N_V) to within 1e-6.
    HyperParams hp;
    hp.arch = Arch::decoder_only;
    hp.max_len = 24;
    hp.n_layers = 1;
    hp.n_heads = 2;
    hp.d_e = 16;
    hp.d_attn = 8;
    hp.d_mid = 8;
    hp.d_mlp = 32;
    hp.n_vocab = 80;
    auto params = init_params<double>(hp, 1);
    for (double& v : params.w_u.mutable_data()) v = 0.0;
    save_checkpoint(params, hp, (dir_ / "uniform.ftx").string());

    auto res = run_cli(dir_, "eval --checkpoint uniform.ftx --vocab v.vocab --corpus corpus.txt");
    EXPECT_EQ(res.exit_code, 0);
    EXPECT_NEAR(std::stod(res.out), std::log(80.0), 1e-6);

    auto again = run_cli(dir_, "eval --checkpoint uniform.ftx --vocab v.vocab "
                               "--corpus corpus.txt");
    EXPECT_EQ(res.out, again.out);
}

TEST_F(CliTest, GenerateIsDeterministicAndHonorsZeroLength) {
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    run_cli(dir_, "train --arch d --corpus corpus.txt --vocab v.vocab --checkpoint m.ftx "
                  "--epochs 2 --seed 5 --lmax 24 --d-e 16 --d-attn 8 --d-mid 8 --d-mlp 32 "
                  "--layers 1");
    auto a = run_cli(dir_, "generate --checkpoint m.ftx --vocab v.vocab --prompt \"the\" "
                           "--tau 1 --len 10 --seed 4");
    auto b = run_cli(dir_, "generate --checkpoint m.ftx --vocab v.vocab --prompt \"the\" "
                           "--tau 1 --len 10 --seed 4");
    EXPECT_EQ(a.exit_code, 0);
    EXPECT_EQ(a.out, b.out);

    auto zero = run_cli(dir_, "generate --checkpoint m.ftx --vocab v.vocab --prompt \"the\" "
                              "--tau 0 --len 0");
    EXPECT_EQ(zero.exit_code, 0);
    EXPECT_EQ(zero.out, "\n");
}

TEST_F(CliTest, ExitCodeUsageErrors) {
    EXPECT_EQ(run_cli(dir_, "--no-such-flag").exit_code, 1);
    EXPECT_EQ(run_cli(dir_, "train").exit_code, 1);          // missing required options
    EXPECT_EQ(run_cli(dir_, "frobnicate").exit_code, 1);     // unknown subcommand
    EXPECT_EQ(run_cli(dir_, "--help").exit_code, 0);
}

TEST_F(CliTest, ExitCodeDataErrors) {
    EXPECT_EQ(run_cli(dir_, "tokenize --train --vocab-size 4 --corpus corpus.txt "
                            "--vocab v.vocab").exit_code, 2);  // undersized target
    EXPECT_EQ(run_cli(dir_, "tokenize --train --vocab-size 80 --corpus missing.txt "
                            "--vocab v.vocab").exit_code, 2);  // unreadable input
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    // Corrupted checkpoint: flip a byte and refresh nothing -> CRC failure.
    run_cli(dir_, "train --arch d --corpus corpus.txt --vocab v.vocab --checkpoint m.ftx "
                  "--epochs 1 --seed 5 --lmax 24 --d-e 16 --d-attn 8 --d-mid 8 --d-mlp 32 "
                  "--layers 1");
    auto bytes = read_file((dir_ / "m.ftx").string());
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x1);
    atomic_write_file((dir_ / "bad.ftx").string(), bytes);
    EXPECT_EQ(run_cli(dir_, "eval --checkpoint bad.ftx --vocab v.vocab --corpus corpus.txt")
                  .exit_code,
              2);
    // Prompt longer than the context window.
    std::string long_prompt(60, 'a');
    EXPECT_EQ(run_cli(dir_, "generate --checkpoint m.ftx --vocab v.vocab --prompt \"" +
                                long_prompt + "\" --tau 0 --len 10")
                  .exit_code,
              2);
}

TEST_F(CliTest, ExitCodeNumericErrors) {
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    // A checkpoint with astronomically large weights overflows the forward
    // pass; the failure must surface as a numeric error, not a crash.
    HyperParams hp;
    hp.arch = Arch::decoder_only;
    hp.max_len = 24;
    hp.n_layers = 1;
    hp.n_heads = 2;
    hp.d_e = 16;
    hp.d_attn = 8;
    hp.d_mid = 8;
    hp.d_mlp = 32;
    hp.n_vocab = 80;
    auto params = init_params<double>(hp, 1);
    // The product gamma * w_u overflows any normalized activation: the
    // unembedding matmul must fault as a numeric error.
    for (double& v : params.final_ln.gamma.mutable_data()) v = 1e170;
    for (double& v : params.w_u.mutable_data()) v = 1e170;
    save_checkpoint(params, hp, (dir_ / "huge.ftx").string());
    EXPECT_EQ(run_cli(dir_, "eval --checkpoint huge.ftx --vocab v.vocab --corpus corpus.txt")
                  .exit_code,
              3);
}

TEST_F(CliTest, ConfigFileProvidesDefaultsFlagsOverride) {
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    std::ofstream((dir_ / "run.cfg").string()) << "epochs=2\nseed=5\nlmax=24\nd-e=16\n"
                                               << "d-attn=8\nd-mid=8\nd-mlp=32\nlayers=1\n";
    auto a = run_cli(dir_, "train --config run.cfg --arch d --corpus corpus.txt "
                           "--vocab v.vocab --checkpoint a.ftx");
    EXPECT_EQ(a.exit_code, 0);
    // An explicit flag beats the config file: one epoch of output differs
    // from two.
    auto b = run_cli(dir_, "train --config run.cfg --arch d --corpus corpus.txt "
                           "--vocab v.vocab --checkpoint b.ftx --epochs 1");
    EXPECT_EQ(b.exit_code, 0);
    EXPECT_NE(read_file((dir_ / "a.ftx").string()), read_file((dir_ / "b.ftx").string()));
}

TEST_F(CliTest, EdTrainGenerateRoundTrip) {
    std::ofstream((dir_ / "pairs.tsv").string()) << "ab\tab\nba\tba\naa\taa\nbb\tbb\n";
    run_cli(dir_, "tokenize --train --vocab-size 10 --corpus pairs.tsv --vocab p.vocab");
    auto res = run_cli(dir_, "train --arch ed --corpus pairs.tsv --vocab p.vocab "
                             "--checkpoint ed.ftx --epochs 60 --lr 2e-3 --seed 2 --lmax 12 "
                             "--d-e 16 --d-attn 8 --d-mid 8 --d-mlp 32 --enc-layers 1 "
                             "--dec-layers 1");
    EXPECT_EQ(res.exit_code, 0);
    auto gen = run_cli(dir_, "generate --checkpoint ed.ftx --vocab p.vocab --prompt \"ab\" "
                             "--tau 0");
    EXPECT_EQ(gen.exit_code, 0);
    EXPECT_EQ(gen.out, "ab\n");
}

TEST_F(CliTest, ETrainReportsMaskedLoss) {
    run_cli(dir_, "tokenize --train --vocab-size 80 --corpus corpus.txt --vocab v.vocab");
    auto res = run_cli(dir_, "train --arch e --p-mask 0.15 --corpus corpus.txt --vocab v.vocab "
                             "--checkpoint e.ftx --loss-log e.loss --epochs 2 --seed 6 "
                             "--lmax 24 --d-e 16 --d-attn 8 --d-mid 8 --d-mlp 32 --layers 1");
    EXPECT_EQ(res.exit_code, 0);
    EXPECT_NE(res.out.find("final mean loss/sample"), std::string::npos);

    // First-epoch records at fresh init hover near |masked| * ln N_V; verify
    // the first nonzero record is an integer multiple of ln(80) within 5%.
    std::istringstream log(read_file((dir_ / "e.loss").string()));
    int epoch, sample;
    double loss;
    while (log >> epoch >> sample >> loss) {
        if (loss > 0.0) {
            double multiple = loss / std::log(80.0);
            EXPECT_NEAR(multiple, std::round(multiple), 0.05);
            break;
        }
    }
}
