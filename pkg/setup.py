try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup

package_name = 'sgldreg'
description = 'deformable image registration with UNet weights sampled by adaptive Langevin dynamics'
requirements = ['numpy>=1.20', 'scipy>=1.6']

# PyPI Readme
long_description = open('README.md').read()

# Pull in the package
package = __import__(package_name)
package_version = package.__version__

setup(name=package_name,
      version=package_version,
      author=package.__author__,
      author_email=package.__author_email__,
      url=package.__url__,
      description=description,
      long_description=long_description,
      long_description_content_type='text/markdown',
      packages=['sgldreg'],
      install_requires=requirements,
      python_requires='>=3.7',
      entry_points={
          'console_scripts': ['sgldreg = sgldreg.cli:main'],
      },
      license='BSD',
      zip_safe=False,
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved :: BSD License',
          'Natural Language :: English',
          'Programming Language :: Python :: 3.7',
          'Programming Language :: Python :: 3.8',
          'Programming Language :: Python :: 3.9',
          'Programming Language :: Python :: 3.10',
          'Programming Language :: Python :: Implementation :: CPython',
          'Topic :: Scientific/Engineering :: Image Processing',
      ])
