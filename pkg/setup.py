"""Builds the optional compiled transport kernels; the package works without them."""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("liverperf._kernels", ["src/liverperf/_kernels.pyx"], include_dirs=[numpy.get_include()])],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
