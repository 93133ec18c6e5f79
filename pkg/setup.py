from setuptools import Extension, setup

# The compiled kernels are optional: if Cython (or a C compiler) is missing
# the install still succeeds and the package falls back to the pure-Python
# kernels in gradmask._kernels_py.
try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext = Extension(
        "gradmask._kernels",
        ["src/gradmask/_kernels.pyx"],
        # -ffp-contract=off: no FMA contraction, so the compiled kernels are
        # bitwise identical to the pure-Python fallback (same IEEE op order).
        extra_compile_args=["-O3", "-ffp-contract=off"],
        optional=True,
    )
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
