"""Moran and Wright-Fisher chains with weak selection and immigration, their diffusion limits, and error experiments."""
