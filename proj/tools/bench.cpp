// Compares the OpenMP kernels against their serial reference on the hot
// paths: dense matmul, batched forward passes, and head-candidate scoring.
// Every pair must agree bit for bit; the parallel split only changes speed.

#include <chrono>
#include <cstdio>
#include <vector>

#include "putri/data.hpp"
#include "putri/eval.hpp"
#include "putri/linalg.hpp"
#include "putri/model.hpp"
#include "putri/parallel.hpp"
#include "putri/pruning.hpp"
#include "putri/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace putri;

namespace {

double now_sec() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Matrix random_matrix(int64_t rows, int64_t cols, uint64_t seed) {
    Matrix m(rows, cols);
    Rng rng(seed);
    for (int64_t i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.next_symmetric(1.0));
    }
    return m;
}

template <typename Fn>
double time_best_of(int reps, Fn&& fn) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const double t0 = now_sec();
        fn();
        best = std::min(best, now_sec() - t0);
    }
    return best;
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("openmp: %d threads\n", omp_get_max_threads());
#else
    std::printf("openmp: unavailable (serial build)\n");
#endif

    // matmul
    {
        const Matrix a = random_matrix(512, 512, 1);
        const Matrix b = random_matrix(512, 512, 2);
        Matrix serial_out, parallel_out;
        const double t_serial =
            time_best_of(3, [&] { serial_out = matmul_serial(a, b); });
        const double t_parallel = time_best_of(3, [&] { parallel_out = matmul(a, b); });
        const bool equal = serial_out == parallel_out;
        std::printf("matmul 512x512x512      serial %7.2f ms   parallel %7.2f ms   x%.2f   %s\n",
                    t_serial * 1e3, t_parallel * 1e3, t_serial / t_parallel,
                    equal ? "bit-equal" : "MISMATCH");
    }

    const ToyTransformer model = init_random(ModelConfig::tiny(), 7);
    std::vector<std::vector<int32_t>> seqs;
    {
        Rng rng(3);
        for (int i = 0; i < 16; ++i) {
            std::vector<int32_t> s(128);
            for (auto& t : s) t = static_cast<int32_t>(rng.next_below(259));
            seqs.push_back(std::move(s));
        }
    }

    // batched perplexity (parallel over sequences)
    {
        set_parallel(false);
        PerplexityResult serial_r;
        const double t_serial = time_best_of(3, [&] { serial_r = perplexity(model, seqs); });
        set_parallel(true);
        PerplexityResult parallel_r;
        const double t_parallel = time_best_of(3, [&] { parallel_r = perplexity(model, seqs); });
        const bool equal =
            serial_r.nll_sum == parallel_r.nll_sum && serial_r.value == parallel_r.value;
        std::printf("perplexity 16x128       serial %7.2f ms   parallel %7.2f ms   x%.2f   %s\n",
                    t_serial * 1e3, t_parallel * 1e3, t_serial / t_parallel,
                    equal ? "bit-equal" : "MISMATCH");
    }

    // head-candidate scoring (parallel over candidates)
    {
        CalibrationSet calib;
        calib.seq_len = 128;
        calib.sequences = {seqs[0]};
        SparsityAllocation alloc;
        alloc.n_kv_heads_to_remove = 2;
        PruneConfig pc;
        pc.target_sparsity = 0.5;

        set_parallel(false);
        ToyTransformer m_serial = model;
        std::vector<std::pair<int, int>> removed_serial;
        const double t_serial = time_best_of(2, [&] {
            m_serial = model;
            removed_serial = prune_attention_heads(m_serial, calib, alloc, pc);
        });
        set_parallel(true);
        ToyTransformer m_parallel = model;
        std::vector<std::pair<int, int>> removed_parallel;
        const double t_parallel = time_best_of(2, [&] {
            m_parallel = model;
            removed_parallel = prune_attention_heads(m_parallel, calib, alloc, pc);
        });
        const bool equal = removed_serial == removed_parallel;
        std::printf("head scoring (2 heads)  serial %7.2f ms   parallel %7.2f ms   x%.2f   %s\n",
                    t_serial * 1e3, t_parallel * 1e3, t_serial / t_parallel,
                    equal ? "same choices" : "MISMATCH");
    }

    return 0;
}
