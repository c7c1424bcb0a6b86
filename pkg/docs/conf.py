# Sphinx configuration for the windmpm API pages.
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import sys
import os
sys.path.insert(0, os.path.abspath('..'))


# -- Project information -----------------------------------------------------

project = 'windmpm'
copyright = '2026, Author'
author = 'Author'
with open(os.path.join(os.path.dirname(__file__), '..', 'windmpm', 'VERSION')) as fd:
    release = fd.read().strip()


# -- General configuration ---------------------------------------------------

extensions = ['sphinx_autodoc_annotation',
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx.ext.todo',
]

templates_path = ['_templates']
language = 'en'
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

add_module_names = False
autodoc_member_order = 'bysource'


# -- Options for HTML output -------------------------------------------------

html_static_path = ['_static']


# -- Options for todo extension ----------------------------------------------

todo_include_todos = True
