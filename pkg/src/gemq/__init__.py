"""Global expert-level mixed-precision quantization for toy MoE language models."""
