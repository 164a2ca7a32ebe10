#pragma once

namespace putri {

// Process-wide switch for the OpenMP code paths. Every parallel loop in the
// library produces output bit-identical to its serial order, so flipping
// this only changes speed; tests and the benchmark compare both paths.
void set_parallel(bool enabled);
bool parallel_enabled();

// Requested worker count (<= 0 leaves the OpenMP runtime default).
void set_threads(int n);

}  // namespace putri
