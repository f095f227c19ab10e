"""Published binary-expression fixed points, copied verbatim (line breaks removed)."""

FIG_EXPRESSION = (
    "1101-0*11+100+0+111+1-000011-1*1110/1101001*1001"
    "+0-10*11*00100/1111-011*1+010+1*00100010101001-0"
    "00*1000110100/1/011000001+1*0/111-10/1/10*0*001*"
    "1/001/11+0/010101+0+0*1+0011+01-0/00110+01*100+0"
    "00/11-101"
)
FIG_OUTPUT = "0" * 189 + "100011000000"

TEXT_EXPRESSION = (
    "001110111001/1+10-10*0/1/1*111/10*010+0/010011-10/10101*0+010/1*00-110*1*0/1/101000-"
    "00000+000-1+1-1011111*010-010/0011111011-010-1100-0/0010000*01*0010000+"
    "0111110+00001+10/10*111111111-10*10-1*11111+01"
)
TEXT_VALUE_BINARY = "10100001011"
