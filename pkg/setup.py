import re

from setuptools import setup, find_packages

# in case of importing other dependencies
with open('kdsde/__init__.py', encoding='utf8') as f:
    version = re.search(r"__version__ = '(.*?)'", f.read()).group(1)

setup(
    name='kdsde',
    version=version,
    packages=find_packages(include=["kdsde*"]),
    license='MIT License',
    description='Particle solvers and diagnostics for killed distribution-dependent SDEs: killed Euler-Maruyama '
                'ensembles, boundary-reservoir transport distances, Picard fixed points, couplings and '
                'Girsanov reweighting.',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'POT>=0.8',
        'pydantic>=1.8',
        'PyYAML>=5.1',
    ],
    entry_points={'console_scripts': ['kdsde=kdsde.__main__:_main']},
    python_requires='>=3.8'
)
