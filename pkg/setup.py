from setuptools import find_packages, setup
import io
import os

with open(os.path.join('windmpm', 'VERSION')) as fd:
    VERSION = fd.read().strip()

setup(
    name='windmpm',
    version=VERSION,
    description='wind-driven MPM simulation with an LBM wind solver and adjoint wind force reconstruction',
    long_description=io.open('README.md', 'r', encoding='utf-8').read(),
    classifiers=[''],
    keywords='mpm lbm adjoint inverse-problem wind',
    author='',
    author_email='',
    url='',
    license='MIT License',
    packages=find_packages(exclude=['tests']),
    package_data={'windmpm': ['VERSION', 'data/*.json']},
    include_package_data=True,
    zip_safe=False,
    install_requires=[
        'blosc',
        'msgpack>=1.0.0',
        'numpy',
        'scipy',
        'tables',
    ],
    entry_points={
        'console_scripts': ['windmpm = windmpm.cli:main'],
    },
)
