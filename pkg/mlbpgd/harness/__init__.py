"""実験ハーネス（設定・データ・画像入出力・レポート・実験・セルフテスト・CLI）"""
