"""
Quasi-LPV identification: model, training stages, scheduling reduction and plants.
"""
import jax

# Gradients are checked against finite differences; float32 is not enough.
jax.config.update("jax_enable_x64", True)
