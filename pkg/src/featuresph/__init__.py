"""Feature-aware SPH particle relaxation for isotropic unstructured mesh generation."""

__version__ = "0.1.0"
