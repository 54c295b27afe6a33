//! Parameter and multiply-add counts for SGE layers at ResNet-50 stage sizes.

use sge::{count_flops, count_params};

fn main() {
    let stages = [(256, 56), (512, 28), (1024, 14), (2048, 7)];
    for (channels, size) in stages {
        println!(
            "C={channels:>4} {size:>2}x{size:<2} G=64: params={} flops={}",
            count_params(channels, 64),
            count_flops(1, channels, size, size, 64)
        );
    }
}
