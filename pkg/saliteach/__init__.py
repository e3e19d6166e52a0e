"""Saliency-guided teacher-student training on planted-salience tasks."""
