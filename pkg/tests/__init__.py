# Tests for the cell-level GAN pipeline
