# Supporting I/O and plotting helpers for the continual unlearning platform
