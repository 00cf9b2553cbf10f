#pragma once

// Reference removal-step table the bundled schedules v1..v5 must reproduce
// (12-block model). Column order: v1, v2, v3, v4, v5.

namespace lnablate::testsupport {

constexpr int kTableLn2[12][5] = {
    {50, 50, 200, 200, 180}, {50, 50, 240, 220, 190}, {50, 50, 280, 240, 200},
    {50, 50, 320, 260, 210}, {50, 50, 360, 280, 220}, {50, 50, 400, 300, 230},
    {50, 50, 440, 320, 240}, {50, 50, 480, 340, 250}, {50, 50, 520, 360, 260},
    {50, 50, 560, 380, 270}, {50, 50, 600, 400, 280}, {50, 50, 640, 420, 290},
};
constexpr int kTableLn1qk[12][5] = {
    {50, 100, 680, 440, 300},  {50, 120, 720, 460, 320},  {50, 140, 760, 480, 340},
    {50, 160, 800, 500, 360},  {50, 180, 840, 520, 380},  {50, 200, 880, 540, 400},
    {50, 220, 920, 560, 420},  {50, 240, 960, 580, 440},  {50, 260, 1000, 600, 460},
    {50, 280, 1040, 620, 480}, {50, 300, 1080, 640, 500}, {50, 320, 1120, 660, 520},
};
constexpr int kTableLn1v[12][5] = {
    {50, 350, 1160, 680, 540},  {50, 350, 1170, 710, 550},  {50, 350, 1180, 740, 560},
    {50, 350, 1190, 770, 570},  {50, 350, 1200, 800, 580},  {50, 350, 1210, 830, 590},
    {50, 350, 1220, 860, 600},  {50, 350, 1230, 890, 610},  {50, 350, 1240, 920, 620},
    {50, 350, 1250, 950, 630},  {50, 350, 1260, 980, 640},  {50, 350, 1270, 1010, 650},
};
constexpr int kTableLnf[5] = {300, 400, 1640, 1040, 660};
constexpr int kTableEot[12][5] = {
    {200, 500, 1740, 1060, 680}, {200, 500, 1740, 1060, 700}, {200, 500, 1740, 1060, 720},
    {200, 500, 1740, 1060, 740}, {200, 500, 1740, 1060, 760}, {200, 500, 1740, 1060, 780},
    {200, 500, 1740, 1060, 800}, {200, 500, 1740, 1060, 820}, {200, 500, 1740, 1060, 840},
    {200, 500, 1740, 1060, 860}, {200, 500, 1740, 1060, 880}, {200, 500, 1740, 1060, 900},
};
constexpr int kTableBos[12][5] = {
    {200, 700, 2040, 1160, 920}, {200, 700, 2040, 1160, 925}, {200, 700, 2040, 1160, 930},
    {200, 700, 2040, 1160, 935}, {200, 700, 2040, 1160, 940}, {200, 700, 2040, 1160, 945},
    {200, 700, 2040, 1160, 950}, {200, 700, 2040, 1160, 955}, {200, 700, 2040, 1160, 960},
    {200, 700, 2040, 1160, 965}, {200, 700, 2040, 1160, 970}, {200, 700, 2040, 1160, 975},
};

}  // namespace lnablate::testsupport
