#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "fuseloc/blas.hpp"

int main(int argc, char** argv) {
    fuseloc::ensure_fast_blas(argv);
    doctest::Context context;
    context.applyCommandLine(argc, argv);
    return context.run();
}
