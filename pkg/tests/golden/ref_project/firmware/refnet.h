#pragma once
// refnet: generated inference entry point.
// Input: 4 raws on fixed<10,4>  value = raw * 2^-6
#define FF_INPUT_WIDTH 4
#define FF_OUTPUT_WIDTH 2
void refnet_forward(const long long x[FF_INPUT_WIDTH], long long y[FF_OUTPUT_WIDTH]);
