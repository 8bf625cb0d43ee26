from os import listdir
from re import Pattern
from re import compile as re_compile

from setuptools import find_packages, setup

from sectionalmoe import __version__


req_regex: Pattern = re_compile(r'^requirements-(\w+).txt$')


setup(
	name='sectionalmoe',
	version=__version__,
	description='Cost model, reference layers and audits for sectionalized mixture-of-experts transformers',
	long_description=open('readme.md').read(),
	long_description_content_type='text/markdown',
	packages=find_packages(exclude=['tests']),
	install_requires=list(filter(None, map(str.strip, open('requirements.txt').read().split()))),
	python_requires='>=3.12',
	license='Mozilla Public License 2.0',
	extras_require=dict(map(lambda x : (x[1], open(x[0]).read().split()), filter(None, map(req_regex.match, listdir())))),
	entry_points={
		'console_scripts': ['sectionalmoe = sectionalmoe.cli:main'],
	},
)
