"""Prompt-conditioned Gaussian prior learning over partially denoised latents, at desk scale."""
