// Generated testbench: one whitespace-separated raw-integer vector per line.
// Inputs are raws on the model's input grid; outputs are the final
// fixed-point layer's raws in the same exchange format.
#include <cstdio>
#include "refnet.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        std::fprintf(stderr, "usage: %s <input.txt> <output.txt>\n", argv[0]);
        return 2;
    }
    std::FILE *in = std::fopen(argv[1], "r");
    if (!in) { std::fprintf(stderr, "cannot open %s\n", argv[1]); return 1; }
    std::FILE *out = std::fopen(argv[2], "w");
    if (!out) { std::fprintf(stderr, "cannot open %s\n", argv[2]); return 1; }

    long long x[FF_INPUT_WIDTH];
    long long y[FF_OUTPUT_WIDTH];
    for (;;) {
        int got = 0;
        for (; got < FF_INPUT_WIDTH; ++got) {
            if (std::fscanf(in, "%lld", &x[got]) != 1) break;
        }
        if (got == 0) break;
        if (got != FF_INPUT_WIDTH) {
            std::fprintf(stderr, "truncated input vector (%d of %d values)\n",
                         got, FF_INPUT_WIDTH);
            return 1;
        }
        refnet_forward(x, y);
        for (int i = 0; i < FF_OUTPUT_WIDTH; ++i)
            std::fprintf(out, i + 1 == FF_OUTPUT_WIDTH ? "%lld\n" : "%lld ", y[i]);
    }
    std::fclose(in);
    std::fclose(out);
    return 0;
}
