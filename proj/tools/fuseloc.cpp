#include "fuseloc/blas.hpp"
#include "fuseloc/cli.hpp"

int main(int argc, char** argv) {
    fuseloc::ensure_fast_blas(argv);
    return fuseloc::run(argc, argv);
}
