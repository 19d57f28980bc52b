"""Sequential diffusion over functional Tucker core sequences."""
