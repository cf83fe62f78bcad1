"""fixflow: compile trained MLPs into bit-accurate fixed-point dataflow
implementations, with hardware-aware training, pruning, cost estimation,
and HLS-style source emission.

Submodules:
    fixed_point  exact two's-complement arithmetic and the precision grammar
    model_ir     dataflow graph IR, model document parsing and validation
    passes       batch-norm fusion and constant folding
    trainer      deterministic training, QAT (straight-through estimator)
    pruning      iterative magnitude pruning, lottery-ticket rewind, BOPs
    kernels      bit-accurate dense/sparse kernels and the emulator
    estimator    DSP/LUT/BOPs and reuse-factor timing model
    profiler     weight statistics and precision-coverage checks
    codegen      HLS-style C++ project writer
    cli          command-line workflow driver
"""

__version__ = "0.1.0"
