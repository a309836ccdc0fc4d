#!/usr/bin/env python3
"""
Medical VQA - Main Entry Point
Pipeline VQA y tế thu nhỏ: dữ liệu → huấn luyện theo stage → đánh giá
"""

import sys

from presentation.cli import main


if __name__ == "__main__":
    sys.exit(main())
