# Cell-level GAN pipeline for histopathology
