#ifndef FF_W1_H
#define FF_W1_H
// layer logits: dense 3 -> 2
// weight fixed<6,1,rnd,sat>  value = raw * 2^-5
// bias   fixed<8,2>  value = raw * 2^-6
// nonzero weights: 3 of 6
// COO records: packed index = out * 3 + in (3 index bits)

static const long long coo_index_1[] = {
    0, 2, 4
};
static const long long coo_weight_1[] = {
    16, -24, 20
};
static const long long bias_1[] = {
    0, 8
};

#endif  // FF_W1_H
